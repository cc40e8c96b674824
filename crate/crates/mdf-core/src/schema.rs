//! Modality schema: the ordered list of per-timestep channels the model
//! sees, with their latent dimensions and roles.

use crate::error::{MdfError, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Partial, test-time-available observation (occluded point set latent).
    Observation,
    /// Training-only full-scene information, estimated at test time.
    Privileged,
    Force,
    Action,
    Proprio,
    Reward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityDef {
    pub name: String,
    pub dim: usize,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModalitySchema {
    entries: Vec<ModalityDef>,
}

impl ModalitySchema {
    pub fn new(entries: Vec<ModalityDef>) -> Result<Self> {
        if entries.is_empty() {
            return Err(MdfError::Config("schema needs at least one modality".into()));
        }
        for e in &entries {
            if e.dim == 0 {
                return Err(MdfError::Config(format!("modality {} has dim 0", e.name)));
            }
        }
        for i in 0..entries.len() {
            for j in i + 1..entries.len() {
                if entries[i].name == entries[j].name {
                    return Err(MdfError::Config(format!("duplicate modality name {}", entries[i].name)));
                }
            }
        }
        Ok(ModalitySchema { entries })
    }

    /// The six-modality PegSlot schema. Point-set modalities carry codec
    /// latents of dimension `d_z`; the rest are z-scored raw channels.
    pub fn desk_default(d_z: usize) -> Self {
        ModalitySchema::new(vec![
            ModalityDef { name: "full_pc".into(), dim: d_z, role: Role::Privileged },
            ModalityDef { name: "partial_pc".into(), dim: d_z, role: Role::Observation },
            ModalityDef { name: "force".into(), dim: 3, role: Role::Force },
            ModalityDef { name: "action".into(), dim: 2, role: Role::Action },
            ModalityDef { name: "proprio".into(), dim: 3, role: Role::Proprio },
            ModalityDef { name: "reward".into(), dim: 1, role: Role::Reward },
        ])
        .expect("static schema is valid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ModalityDef] {
        &self.entries
    }

    pub fn dim(&self, m: usize) -> usize {
        self.entries[m].dim
    }

    pub fn name(&self, m: usize) -> &str {
        &self.entries[m].name
    }

    pub fn role(&self, m: usize) -> Role {
        self.entries[m].role
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn index_of_role(&self, role: Role) -> Option<usize> {
        self.entries.iter().position(|e| e.role == role)
    }

    pub fn total_dim(&self) -> usize {
        self.entries.iter().map(|e| e.dim).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_schema_has_six_modalities() {
        let s = ModalitySchema::desk_default(16);
        assert_eq!(s.len(), 6);
        assert_eq!(s.total_dim(), 16 + 16 + 3 + 2 + 3 + 1);
        assert_eq!(s.index_of_role(Role::Force), Some(2));
        assert_eq!(s.index_of("reward"), Some(5));
    }

    #[test]
    fn rejects_duplicates_and_zero_dims() {
        assert!(ModalitySchema::new(vec![
            ModalityDef { name: "a".into(), dim: 1, role: Role::Action },
            ModalityDef { name: "a".into(), dim: 2, role: Role::Reward },
        ])
        .is_err());
        assert!(ModalitySchema::new(vec![ModalityDef {
            name: "a".into(),
            dim: 0,
            role: Role::Action
        }])
        .is_err());
    }
}
