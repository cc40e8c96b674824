//! The 2D time–modality noise level matrix and inference-time sampling
//! plans built from condition/target/discard blocks.

use crate::error::{MdfError, Result};
use crate::schedule::ddim_ladder;
use crate::schema::{ModalitySchema, Role};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// T×M grid of diffusion levels, one per (timestep, modality) entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoiseMatrix {
    t_len: usize,
    m_len: usize,
    levels: Vec<usize>, // row-major over t, then m
}

impl NoiseMatrix {
    pub fn filled(t_len: usize, m_len: usize, level: usize) -> Self {
        NoiseMatrix { t_len, m_len, levels: vec![level; t_len * m_len] }
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn m_len(&self) -> usize {
        self.m_len
    }

    pub fn get(&self, t: usize, m: usize) -> usize {
        self.levels[t * self.m_len + m]
    }

    pub fn set(&mut self, t: usize, m: usize, level: usize) {
        self.levels[t * self.m_len + m] = level;
    }

    /// Flat view, index (t*M + m).
    pub fn levels(&self) -> &[usize] {
        &self.levels
    }
}

/// Per-entry i.i.d. training levels: 0.2·δ(0) + 0.1·δ(K) + 0.7·Uniform{0..K}.
/// The point masses guarantee the model regularly sees the exact clean and
/// pure-noise levels that inference plans use.
pub fn sample_training_matrix<R: Rng>(
    t_len: usize,
    m_len: usize,
    k_max: usize,
    rng: &mut R,
) -> NoiseMatrix {
    let mut m = NoiseMatrix::filled(t_len, m_len, 0);
    for slot in m.levels.iter_mut() {
        let u: f64 = rng.gen();
        *slot = if u < 0.2 {
            0
        } else if u < 0.3 {
            k_max
        } else {
            rng.gen_range(0..=k_max)
        };
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    Condition,
    Target,
    Discard,
}

impl Block {
    pub fn as_char(self) -> char {
        match self {
            Block::Condition => 'C',
            Block::Target => 'T',
            Block::Discard => 'D',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Policy,
    Planner,
    InverseDynamics,
    StateEstimation,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PlanOptions {
    /// Force column becomes DISCARD everywhere (wrench ablation).
    pub no_wrench: bool,
    /// History privileged entries become DISCARD instead of TARGET.
    pub no_state_estimation: bool,
    /// Reward column becomes TARGET in the future instead of DISCARD.
    pub predict_reward: bool,
    /// History actions are CONDITION (executed actions are known at test
    /// time); set false to DISCARD them instead.
    pub condition_history_actions: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            no_wrench: false,
            no_state_estimation: false,
            predict_reward: false,
            condition_history_actions: true,
        }
    }
}

/// Block-role grid plus the shared DDIM ladder for TARGET entries.
#[derive(Clone, Debug)]
pub struct SamplingPlan {
    t_len: usize,
    blocks: Vec<Block>, // row-major over t, then m
    k_max: usize,
    ddim_levels: Vec<usize>,
}

impl SamplingPlan {
    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn m_len(&self) -> usize {
        self.blocks.len() / self.t_len
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn block(&self, t: usize, m: usize) -> Block {
        self.blocks[t * self.m_len() + m]
    }

    /// Ladder of TARGET levels, strictly decreasing from K to 0.
    pub fn ddim_levels(&self) -> &[usize] {
        &self.ddim_levels
    }

    /// Noise matrix in effect at one ladder position: CONDITION→0,
    /// DISCARD→K, TARGET→ladder level.
    pub fn matrix_at(&self, ladder_index: usize) -> Result<NoiseMatrix> {
        let level = *self.ddim_levels.get(ladder_index).ok_or_else(|| {
            MdfError::Parameter(format!(
                "ladder index {ladder_index} out of {} levels",
                self.ddim_levels.len()
            ))
        })?;
        let m_len = self.m_len();
        let mut out = NoiseMatrix::filled(self.t_len, m_len, 0);
        for t in 0..self.t_len {
            for m in 0..m_len {
                let lvl = match self.block(t, m) {
                    Block::Condition => 0,
                    Block::Discard => self.k_max,
                    Block::Target => level,
                };
                out.set(t, m, lvl);
            }
        }
        Ok(out)
    }

    /// One row per modality, one char per timestep (C/T/D).
    pub fn grid_text(&self, schema: &ModalitySchema) -> String {
        let mut out = String::new();
        let width = schema.entries().iter().map(|e| e.name.len()).max().unwrap_or(0);
        for m in 0..self.m_len() {
            let chars: String = (0..self.t_len).map(|t| self.block(t, m).as_char()).collect();
            out.push_str(&format!("{:width$} {}\n", schema.name(m), chars));
        }
        out
    }
}

/// Build the block plan for one inference mode over a T-step window with
/// history length h (timesteps 0..h are the past, h..T the future).
pub fn make_plan(
    mode: PlanMode,
    h: usize,
    t_len: usize,
    schema: &ModalitySchema,
    options: &PlanOptions,
    k_max: usize,
    ddim_steps: usize,
) -> Result<SamplingPlan> {
    if h == 0 || h >= t_len {
        return Err(MdfError::Parameter(format!(
            "history length {h} outside 1..{} for a {t_len}-step window",
            t_len - 1
        )));
    }
    if ddim_steps == 0 || ddim_steps > k_max {
        return Err(MdfError::Parameter(format!("ddim steps {ddim_steps} outside 1..={k_max}")));
    }
    let m_len = schema.len();
    let mut blocks = vec![Block::Discard; t_len * m_len];
    for t in 0..t_len {
        let past = t < h;
        for m in 0..m_len {
            let role = schema.role(m);
            let b = match mode {
                PlanMode::Policy | PlanMode::Planner => match role {
                    Role::Observation | Role::Proprio | Role::Force => {
                        if past {
                            Block::Condition
                        } else if mode == PlanMode::Planner {
                            Block::Target
                        } else {
                            Block::Discard
                        }
                    }
                    Role::Privileged => {
                        if past {
                            if options.no_state_estimation {
                                Block::Discard
                            } else {
                                Block::Target
                            }
                        } else if mode == PlanMode::Planner {
                            Block::Target
                        } else {
                            Block::Discard
                        }
                    }
                    Role::Action => {
                        if past {
                            if options.condition_history_actions {
                                Block::Condition
                            } else {
                                Block::Discard
                            }
                        } else {
                            Block::Target
                        }
                    }
                    Role::Reward => {
                        if !past && options.predict_reward {
                            Block::Target
                        } else {
                            Block::Discard
                        }
                    }
                },
                PlanMode::InverseDynamics => match role {
                    Role::Observation | Role::Proprio | Role::Force => Block::Condition,
                    Role::Action => Block::Target,
                    Role::Privileged | Role::Reward => Block::Discard,
                },
                PlanMode::StateEstimation => match role {
                    Role::Observation => {
                        // the privileged row is estimated over the whole
                        // window; partials condition wherever available
                        Block::Condition
                    }
                    Role::Privileged => Block::Target,
                    _ => Block::Discard,
                },
            };
            blocks[t * m_len + m] = b;
        }
    }
    if options.no_wrench {
        if let Some(fm) = schema.index_of_role(Role::Force) {
            for t in 0..t_len {
                blocks[t * m_len + fm] = Block::Discard;
            }
        }
    }
    Ok(SamplingPlan { t_len, blocks, k_max, ddim_levels: ddim_ladder(k_max, ddim_steps) })
}

/// Forward-dynamics plan: observations condition the past, actions condition
/// the whole window, and future observations plus the privileged row are
/// denoised. History privileged entries follow the state-estimation toggle.
pub fn make_dynamics_plan(
    h: usize,
    t_len: usize,
    schema: &ModalitySchema,
    options: &PlanOptions,
    k_max: usize,
    ddim_steps: usize,
) -> Result<SamplingPlan> {
    let mut plan = make_plan(PlanMode::Planner, h, t_len, schema, options, k_max, ddim_steps)?;
    if let Some(am) = schema.index_of_role(Role::Action) {
        for t in 0..t_len {
            plan.blocks[t * schema.len() + am] = Block::Condition;
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schema() -> ModalitySchema {
        ModalitySchema::desk_default(16)
    }

    #[test]
    fn degenerate_level_set_is_all_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = sample_training_matrix(4, 3, 0, &mut rng);
        assert!(m.levels().iter().all(|&l| l == 0));
    }

    #[test]
    fn training_levels_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = sample_training_matrix(50, 6, 1000, &mut rng);
        assert!(m.levels().iter().all(|&l| l <= 1000));
    }

    #[test]
    fn policy_plan_layout() {
        let plan =
            make_plan(PlanMode::Policy, 4, 10, &schema(), &PlanOptions::default(), 1000, 20)
                .unwrap();
        let s = schema();
        let (full, partial, force, action, proprio, reward) = (0, 1, 2, 3, 4, 5);
        assert_eq!(s.name(full), "full_pc");
        for t in 0..10 {
            let past = t < 4;
            assert_eq!(plan.block(t, partial), if past { Block::Condition } else { Block::Discard });
            assert_eq!(plan.block(t, proprio), if past { Block::Condition } else { Block::Discard });
            assert_eq!(plan.block(t, force), if past { Block::Condition } else { Block::Discard });
            assert_eq!(plan.block(t, full), if past { Block::Target } else { Block::Discard });
            assert_eq!(plan.block(t, action), if past { Block::Condition } else { Block::Target });
            assert_eq!(plan.block(t, reward), Block::Discard);
        }
    }

    #[test]
    fn state_estimation_targets_privileged_row_everywhere() {
        let plan = make_plan(
            PlanMode::StateEstimation,
            9,
            10,
            &schema(),
            &PlanOptions::default(),
            1000,
            20,
        )
        .unwrap();
        for t in 0..10 {
            assert_eq!(plan.block(t, 0), Block::Target);
            assert_eq!(plan.block(t, 1), Block::Condition);
        }
    }

    #[test]
    fn no_wrench_discards_force_row() {
        let opts = PlanOptions { no_wrench: true, ..PlanOptions::default() };
        let plan = make_plan(PlanMode::Policy, 4, 10, &schema(), &opts, 1000, 20).unwrap();
        for t in 0..10 {
            assert_eq!(plan.block(t, 2), Block::Discard);
        }
        let text = plan.grid_text(&schema());
        let force_line = text.lines().find(|l| l.starts_with("force")).unwrap();
        assert!(force_line.ends_with("DDDDDDDDDD"));
    }

    #[test]
    fn matrix_at_emits_only_plan_levels() {
        let plan =
            make_plan(PlanMode::Planner, 3, 10, &schema(), &PlanOptions::default(), 1000, 7)
                .unwrap();
        let ladder = plan.ddim_levels().to_vec();
        assert_eq!(*ladder.first().unwrap(), 1000);
        assert_eq!(*ladder.last().unwrap(), 0);
        for (i, &lvl) in ladder.iter().enumerate() {
            let m = plan.matrix_at(i).unwrap();
            for t in 0..10 {
                for mm in 0..6 {
                    let got = m.get(t, mm);
                    match plan.block(t, mm) {
                        Block::Condition => assert_eq!(got, 0),
                        Block::Discard => assert_eq!(got, 1000),
                        Block::Target => assert_eq!(got, lvl),
                    }
                }
            }
        }
        // final ladder step puts all targets at level 0
        let last = plan.matrix_at(ladder.len() - 1).unwrap();
        for t in 0..10 {
            for mm in 0..6 {
                if plan.block(t, mm) == Block::Target {
                    assert_eq!(last.get(t, mm), 0);
                }
            }
        }
        assert!(plan.matrix_at(ladder.len()).is_err());
    }

    #[test]
    fn all_modes_are_total() {
        for mode in [
            PlanMode::Policy,
            PlanMode::Planner,
            PlanMode::InverseDynamics,
            PlanMode::StateEstimation,
        ] {
            for h in 1..10 {
                for nw in [false, true] {
                    for ns in [false, true] {
                        let opts = PlanOptions {
                            no_wrench: nw,
                            no_state_estimation: ns,
                            ..PlanOptions::default()
                        };
                        let plan = make_plan(mode, h, 10, &schema(), &opts, 1000, 10).unwrap();
                        assert_eq!(plan.t_len(), 10);
                        assert_eq!(plan.m_len(), 6);
                    }
                }
            }
        }
        assert!(make_plan(PlanMode::Policy, 0, 10, &schema(), &PlanOptions::default(), 1000, 10)
            .is_err());
        assert!(make_plan(PlanMode::Policy, 10, 10, &schema(), &PlanOptions::default(), 1000, 10)
            .is_err());
    }

    #[test]
    fn inverse_dynamics_conditions_observations_targets_actions() {
        let plan = make_plan(
            PlanMode::InverseDynamics,
            4,
            10,
            &schema(),
            &PlanOptions::default(),
            1000,
            20,
        )
        .unwrap();
        for t in 0..10 {
            assert_eq!(plan.block(t, 1), Block::Condition); // partial
            assert_eq!(plan.block(t, 2), Block::Condition); // force
            assert_eq!(plan.block(t, 4), Block::Condition); // proprio
            assert_eq!(plan.block(t, 3), Block::Target); // action
            assert_eq!(plan.block(t, 5), Block::Discard); // reward
        }
    }
}
