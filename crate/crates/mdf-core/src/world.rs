//! PegSlot-2D: a planar peg-insertion task with spring contact, a scripted
//! expert, point-set rendering under a gripper-shadow occlusion model, and
//! labeled anomaly injection for the localization benchmark.
//!
//! Coordinate frame: x right, y up, workspace box [0,1]². The gripper carries
//! the peg rigidly below it; a wall with a slot gap spans the workspace at a
//! fixed height. Contact is a one-sided spring: motion into a blocking
//! surface is stopped at the surface and the spring load is reported.

use crate::codec::PointSet;
use crate::error::{MdfError, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const PEG_WIDTH: f64 = 0.08;
pub const SLOT_WIDTH: f64 = 0.10;
pub const K_SPRING: f64 = 50.0;
pub const A_MAX: f64 = 0.1;
pub const V_DESCEND: f64 = 0.05;
pub const DT: f64 = 0.05;
/// Environment steps per episode; downsampled by [`STRIDE`] into model frames.
pub const H_ENV: usize = 40;
pub const STRIDE: usize = 4;
pub const T_MODEL: usize = H_ENV / STRIDE;
pub const SIGMA_PC: f64 = 0.005;
pub const EXPERT_NOISE: f64 = 0.01;
pub const POINT_SET_N: usize = 64;

/// Fixed scene geometry (workspace units).
pub const Y_WALL: f64 = 0.40;
pub const SLOT_DEPTH: f64 = 0.08;
pub const PEG_HEIGHT: f64 = 0.12;
/// Vertical drop from the gripper to the peg center.
const PEG_DROP: f64 = 0.10;
/// The peg counts as inserted once its bottom is this far below the wall top.
const INSERT_DEPTH: f64 = 0.03;
/// Largest |peg_x - slot_x| that still fits through the gap.
pub const HALF_CLEARANCE: f64 = (SLOT_WIDTH - PEG_WIDTH) / 2.0;

/// Gripper-shadow half-width: zero when the gripper is high, growing as it
/// descends, so low poses hide the slot neighborhood from the partial view.
const OCC_GROWTH: f64 = 1.0;
const OCC_Y_REF: f64 = 0.60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub gripper_pos: [f64; 2],
    /// Peg center relative to the gripper (rigid grasp).
    pub peg_offset: [f64; 2],
    pub grip_closed: bool,
    pub slot_center_x: f64,
    pub slot_width: f64,
    /// Load the peg exerts on whatever blocks it (pressing down → negative y).
    pub contact_force: [f64; 2],
    /// Moment of that load about the peg center.
    pub contact_torque: f64,
}

impl WorldState {
    /// A freshly grasped peg hovering at `gripper_pos` over a slot at
    /// `slot_center_x`, with zero contact load.
    pub fn initial(slot_center_x: f64, gripper_pos: [f64; 2]) -> Result<Self> {
        let s = WorldState {
            gripper_pos,
            peg_offset: [0.0, -PEG_DROP],
            grip_closed: true,
            slot_center_x,
            slot_width: SLOT_WIDTH,
            contact_force: [0.0, 0.0],
            contact_torque: 0.0,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if !(self.slot_width > PEG_WIDTH) {
            return Err(MdfError::Parameter(format!(
                "slot width {} must exceed peg width {PEG_WIDTH}",
                self.slot_width
            )));
        }
        let in_box = |p: [f64; 2]| p.iter().all(|&c| (0.0..=1.0).contains(&c));
        if !in_box(self.gripper_pos) || !in_box(self.peg_center()) {
            return Err(MdfError::Parameter("pose outside the workspace box".into()));
        }
        Ok(())
    }

    pub fn peg_center(&self) -> [f64; 2] {
        [
            self.gripper_pos[0] + self.peg_offset[0],
            self.gripper_pos[1] + self.peg_offset[1],
        ]
    }

    pub fn peg_bottom(&self) -> [f64; 2] {
        let c = self.peg_center();
        [c[0], c[1] - PEG_HEIGHT / 2.0]
    }

    pub fn aligned(&self) -> bool {
        // small slop so a peg clamped exactly to the slot wall still counts
        (self.peg_center()[0] - self.slot_center_x).abs() <= HALF_CLEARANCE + 1e-9
    }
}

/// One environment step: the executed (clipped) action, the resulting state,
/// and the shaped reward.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub action: [f64; 2],
    pub next: WorldState,
    pub reward: f64,
}

pub fn is_success(state: &WorldState) -> bool {
    state.aligned() && state.peg_bottom()[1] <= Y_WALL - INSERT_DEPTH + 1e-9
}

fn clip_norm(a: [f64; 2], max: f64) -> [f64; 2] {
    let n = (a[0] * a[0] + a[1] * a[1]).sqrt();
    if n > max {
        [a[0] * max / n, a[1] * max / n]
    } else {
        a
    }
}

/// Euler step with one-sided spring contact. Deterministic.
pub fn step(state: &WorldState, action: [f64; 2]) -> Result<Transition> {
    if !action.iter().all(|a| a.is_finite()) {
        return Err(MdfError::Numeric(format!("non-finite action {action:?}")));
    }
    let a = clip_norm(action, A_MAX);
    let mut g = [state.gripper_pos[0] + DT * a[0], state.gripper_pos[1] + DT * a[1]];
    // The arm is kinematically confined to the workspace box.
    g[0] = g[0].clamp(0.0, 1.0);
    g[1] = g[1].clamp(PEG_DROP + PEG_HEIGHT / 2.0, 1.0);

    let cx = state.slot_center_x;
    let floor_y = Y_WALL - SLOT_DEPTH;
    let mut force = [0.0, 0.0];
    let mut torque = 0.0;

    let cur_bottom = state.peg_bottom()[1];
    let inside = cur_bottom < Y_WALL - 1e-12;
    if inside {
        // in the slot: the walls confine laterally, the floor from below
        let px = g[0] + state.peg_offset[0];
        let (lo, hi) = (cx - HALF_CLEARANCE, cx + HALF_CLEARANCE);
        let mut side_pen = 0.0;
        if px < lo {
            side_pen = lo - px;
            g[0] = lo - state.peg_offset[0];
            force[0] = -K_SPRING * side_pen;
        } else if px > hi {
            side_pen = px - hi;
            g[0] = hi - state.peg_offset[0];
            force[0] = K_SPRING * side_pen;
        }
        let bottom = g[1] + state.peg_offset[1] - PEG_HEIGHT / 2.0;
        if bottom < floor_y {
            let pen = floor_y - bottom;
            g[1] += pen;
            force[1] = -K_SPRING * pen;
        }
        if side_pen > 0.0 {
            // reaction acts on the submerged part of the side face
            let py = g[1] + state.peg_offset[1];
            let b = (g[1] + state.peg_offset[1] - PEG_HEIGHT / 2.0).max(floor_y);
            let contact_y = (b + Y_WALL.min(py + PEG_HEIGHT / 2.0)) / 2.0;
            torque = -(contact_y - py) * force[0];
        }
    } else {
        // above the wall: descent is blocked unless the peg fits the gap
        let px = g[0] + state.peg_offset[0];
        let bottom = g[1] + state.peg_offset[1] - PEG_HEIGHT / 2.0;
        let fits = (px - cx).abs() <= HALF_CLEARANCE;
        if bottom < Y_WALL && !fits {
            let pen = Y_WALL - bottom;
            g[1] += pen;
            force[1] = -K_SPRING * pen;
            // support = footprint minus the gap; its centroid offset gives the
            // load a moment whose sign points toward the slot
            let (peg_l, peg_r) = (px - PEG_WIDTH / 2.0, px + PEG_WIDTH / 2.0);
            let (gap_l, gap_r) = (cx - SLOT_WIDTH / 2.0, cx + SLOT_WIDTH / 2.0);
            let supp_c = if peg_r > gap_l && peg_l < gap_l {
                (peg_l + gap_l) / 2.0
            } else if peg_l < gap_r && peg_r > gap_r {
                (gap_r + peg_r) / 2.0
            } else {
                px
            };
            torque = -(supp_c - px) * (-force[1]);
        }
    }

    let mut next = state.clone();
    next.gripper_pos = g;
    next.contact_force = force;
    next.contact_torque = torque;

    let bottom = next.peg_bottom();
    let target = [cx, Y_WALL - INSERT_DEPTH];
    let dist = ((bottom[0] - target[0]).powi(2) + (bottom[1] - target[1]).powi(2)).sqrt();
    let reward = -dist + if is_success(&next) { 1.0 } else { 0.0 };
    Ok(Transition { action: a, next, reward })
}

/// Noise-free phase controller: align above the slot, descend when aligned,
/// wiggle toward the gap while pressing, hold after insertion.
pub fn expert_nominal(state: &WorldState) -> [f64; 2] {
    if is_success(state) {
        // regulate a little below the threshold so exploration noise cannot
        // drift the peg back out
        let ay = if state.peg_bottom()[1] > Y_WALL - INSERT_DEPTH - 0.015 {
            -V_DESCEND
        } else {
            0.0
        };
        return [0.0, ay];
    }
    let dx = state.slot_center_x - state.peg_center()[0];
    let bottom = state.peg_bottom()[1];
    let lateral = (6.0 * dx).clamp(-0.0866, 0.0866);
    if state.contact_force[1] < 0.0 && bottom <= Y_WALL + 1e-9 {
        // resting on the wall: slide toward the gap; the held downward
        // component is blocked while misaligned and takes over the moment
        // the wiggle crosses into the clearance band
        [lateral, -V_DESCEND]
    } else if dx.abs() > 0.6 * HALF_CLEARANCE {
        [lateral, -V_DESCEND]
    } else {
        [(4.0 * dx).clamp(-0.02, 0.02), -V_DESCEND]
    }
}

/// The nominal controller plus Gaussian exploration noise. Two standard
/// normals are always drawn so the stream advances identically per call.
pub fn scripted_expert<R: Rng>(state: &WorldState, rng: &mut R) -> [f64; 2] {
    let nominal = expert_nominal(state);
    let nx: f64 = rng.sample(StandardNormal);
    let ny: f64 = rng.sample(StandardNormal);
    [nominal[0] + EXPERT_NOISE * nx, nominal[1] + EXPERT_NOISE * ny]
}

fn scene_segments(state: &WorldState) -> Vec<([f64; 2], [f64; 2])> {
    let c = state.peg_center();
    let (hw, hh) = (PEG_WIDTH / 2.0, PEG_HEIGHT / 2.0);
    let (gap_l, gap_r) = (
        state.slot_center_x - state.slot_width / 2.0,
        state.slot_center_x + state.slot_width / 2.0,
    );
    let floor_y = Y_WALL - SLOT_DEPTH;
    vec![
        // peg outline
        ([c[0] - hw, c[1] - hh], [c[0] + hw, c[1] - hh]),
        ([c[0] + hw, c[1] - hh], [c[0] + hw, c[1] + hh]),
        ([c[0] + hw, c[1] + hh], [c[0] - hw, c[1] + hh]),
        ([c[0] - hw, c[1] + hh], [c[0] - hw, c[1] - hh]),
        // wall top on both sides of the gap
        ([0.0, Y_WALL], [gap_l, Y_WALL]),
        ([gap_r, Y_WALL], [1.0, Y_WALL]),
        // slot interior
        ([gap_l, Y_WALL], [gap_l, floor_y]),
        ([gap_r, Y_WALL], [gap_r, floor_y]),
        ([gap_l, floor_y], [gap_r, floor_y]),
    ]
}

fn seg_len(s: &([f64; 2], [f64; 2])) -> f64 {
    ((s.1[0] - s.0[0]).powi(2) + (s.1[1] - s.0[1]).powi(2)).sqrt()
}

fn dist_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

pub fn shadow_halfwidth(gripper_y: f64) -> f64 {
    OCC_GROWTH * (OCC_Y_REF - gripper_y).max(0.0)
}

/// Whether a scene point falls in the gripper shadow for this pose.
pub fn is_occluded(state: &WorldState, p: [f64; 2]) -> bool {
    let w = shadow_halfwidth(state.gripper_pos[1]);
    w > 0.0 && dist_to_segment(p, state.gripper_pos, state.peg_bottom()) <= w
}

/// Sample the full outline point set and its occluded partial counterpart.
/// `sigma_pc` jitters surviving partial points; the full set stays clean.
/// Exactly 64 uniforms + 128 normals are drawn regardless of the pose.
pub fn render_pointsets_with<R: Rng>(
    state: &WorldState,
    rng: &mut R,
    sigma_pc: f64,
) -> (PointSet, PointSet) {
    let segs = scene_segments(state);
    let lens: Vec<f64> = segs.iter().map(seg_len).collect();
    let total: f64 = lens.iter().sum();
    let mut full_pts = Vec::with_capacity(POINT_SET_N);
    for _ in 0..POINT_SET_N {
        let mut u = rng.gen::<f64>() * total;
        let mut idx = 0;
        while idx + 1 < segs.len() && u > lens[idx] {
            u -= lens[idx];
            idx += 1;
        }
        let (a, b) = segs[idx];
        let t = if lens[idx] > 0.0 { (u / lens[idx]).clamp(0.0, 1.0) } else { 0.0 };
        full_pts.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    let jitter: Vec<[f64; 2]> = (0..POINT_SET_N)
        .map(|_| [rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)])
        .collect();

    let mut partial_pts = Vec::with_capacity(POINT_SET_N);
    let mut valid = Vec::with_capacity(POINT_SET_N);
    for (p, j) in full_pts.iter().zip(&jitter) {
        if is_occluded(state, *p) {
            partial_pts.push([0.0, 0.0]);
            valid.push(false);
        } else {
            partial_pts.push([
                (p[0] + sigma_pc * j[0]) as f32,
                (p[1] + sigma_pc * j[1]) as f32,
            ]);
            valid.push(true);
        }
    }
    let full = PointSet::dense(full_pts.iter().map(|p| [p[0] as f32, p[1] as f32]).collect())
        .expect("outline samples are finite");
    let partial = PointSet::new(partial_pts, valid).expect("shadow never covers the whole scene");
    (partial, full)
}

pub fn render_pointsets<R: Rng>(state: &WorldState, rng: &mut R) -> (PointSet, PointSet) {
    render_pointsets_with(state, rng, SIGMA_PC)
}

/// One recorded trajectory: T_MODEL frames of all six modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub partial: Vec<PointSet>,
    pub full: Vec<PointSet>,
    pub force: Vec<[f32; 3]>,
    pub action: Vec<[f32; 2]>,
    pub proprio: Vec<[f32; 3]>,
    pub reward: Vec<f32>,
}

impl TrajectoryRecord {
    pub fn t_len(&self) -> usize {
        self.partial.len()
    }
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub record: TrajectoryRecord,
    pub success: bool,
    pub final_reward: f64,
}

/// Draw a random task pose: slot position and a nearby gripper start.
pub fn sample_initial<R: Rng>(rng: &mut R) -> WorldState {
    let slot_cx = rng.gen_range(0.35..0.65);
    let gx = slot_cx + rng.gen_range(-0.04..0.04);
    let gy = rng.gen_range(0.560..0.580);
    WorldState::initial(slot_cx, [gx, gy]).expect("sampled pose is in the box")
}

/// Roll one expert episode: the controller picks an action every STRIDE env
/// steps and holds it, matching the model's frame rate. Frame t records the
/// observation before the block and the action executed through it.
pub fn run_expert_episode(seed: u64, index: u64) -> Episode {
    let mut init_rng = crate::rng::stream(seed, "ep-init", index);
    let mut expert_rng = crate::rng::stream(seed, "ep-expert", index);
    let render_seed = crate::rng::derive_seed(seed, "ep-render", index);

    let mut state = sample_initial(&mut init_rng);
    let mut record = TrajectoryRecord {
        partial: Vec::with_capacity(T_MODEL),
        full: Vec::with_capacity(T_MODEL),
        force: Vec::with_capacity(T_MODEL),
        action: Vec::with_capacity(T_MODEL),
        proprio: Vec::with_capacity(T_MODEL),
        reward: Vec::with_capacity(T_MODEL),
    };
    let mut last_reward = 0.0;
    let mut prev_executed = [0.0f64; 2];
    for t in 0..T_MODEL {
        let mut render_rng = crate::rng::stream(render_seed, "frame", t as u64);
        let (partial, full) = render_pointsets(&state, &mut render_rng);
        record.partial.push(partial);
        record.full.push(full);
        record.force.push([
            state.contact_force[0] as f32,
            state.contact_force[1] as f32,
            state.contact_torque as f32,
        ]);
        record.proprio.push([
            state.gripper_pos[0] as f32,
            state.gripper_pos[1] as f32,
            f32::from(u8::from(state.grip_closed)),
        ]);
        // Sensor convention: the action recorded at frame t is the one whose
        // execution produced this observation (zero before the first block).
        record.action.push([prev_executed[0] as f32, prev_executed[1] as f32]);

        let a = scripted_expert(&state, &mut expert_rng);
        let mut executed = a;
        for _ in 0..STRIDE {
            let tr = step(&state, a).expect("expert actions are finite");
            executed = tr.action;
            last_reward = tr.reward;
            state = tr.next;
        }
        prev_executed = executed;
        record.reward.push(last_reward as f32);
    }
    Episode { record, success: is_success(&state), final_reward: last_reward }
}

/// Which recorded channel a corruption touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorruptionKind {
    Force,
    PartialPc,
}

impl CorruptionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::Force => "force",
            CorruptionKind::PartialPc => "partial_pc",
        }
    }
}

/// Ground-truth label for an injected corruption.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnomalyLabel {
    pub t: usize,
    pub kind: CorruptionKind,
}

/// Corrupt exactly one (timestep, channel) entry, leaving every other entry
/// bitwise untouched, and return the ground-truth label.
///
/// Force: a load spike of magnitude 5 in per-component-std units, random
/// direction. Partial points: 25% of the valid points teleport to uniform
/// workspace positions.
pub fn inject_anomaly<R: Rng>(
    record: &mut TrajectoryRecord,
    t_star: usize,
    kind: CorruptionKind,
    force_std: [f32; 3],
    rng: &mut R,
) -> Result<AnomalyLabel> {
    if t_star >= record.t_len() {
        return Err(MdfError::Parameter(format!(
            "t*={t_star} out of range for T={}",
            record.t_len()
        )));
    }
    match kind {
        CorruptionKind::Force => {
            let dir: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let n = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
            for c in 0..3 {
                record.force[t_star][c] += 5.0 * force_std[c] * (dir[c] / n) as f32;
            }
        }
        CorruptionKind::PartialPc => {
            let ps = &record.partial[t_star];
            let valid_idx: Vec<usize> =
                (0..ps.slots()).filter(|&i| ps.valid()[i]).collect();
            let n_replace = ((valid_idx.len() as f64) * 0.25).round().max(1.0) as usize;
            let mut pool = valid_idx;
            let mut pts: Vec<[f32; 2]> = ps.points().to_vec();
            let mask = ps.valid().to_vec();
            for _ in 0..n_replace {
                let pick = rng.gen_range(0..pool.len());
                let slot = pool.swap_remove(pick);
                pts[slot] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            }
            record.partial[t_star] = PointSet::new(pts, mask)?;
        }
    }
    Ok(AnomalyLabel { t: t_star, kind })
}
