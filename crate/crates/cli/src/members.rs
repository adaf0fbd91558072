//! Ensemble member descriptions, read from a small JSON file:
//!
//! ```json
//! {
//!   "members": [
//!     {"checkpoint": "runs/moe7.ytck"},
//!     {"model": "mlp512_256", "seed": 3, "keep_prob": 0.9}
//!   ],
//!   "meta": {"hidden": 512, "keep_prob": 0.8},
//!   "k": 20
//! }
//! ```
//!
//! A member is a trained checkpoint on disk or an architecture to build
//! and train in place. The optional `meta` (stacking only) is either a
//! zoo architecture (`{"model": ...}`) or the default
//! dense→relu→dropout→dense head with overrides.

use std::path::PathBuf;

use serde::Deserialize;
use yt8m_core::modelzoo::{ArchitectureSpec, ModelZooError};
use yt8m_core::nncore::RegConfig;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MembersFile {
    pub members: Vec<MemberEntry>,
    #[serde(default)]
    pub meta: Option<MetaEntry>,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, untagged)]
pub enum MemberEntry {
    Checkpoint {
        checkpoint: PathBuf,
    },
    Architecture {
        model: String,
        #[serde(default)]
        mixtures: Option<usize>,
        #[serde(default)]
        keep_prob: Option<f64>,
        #[serde(default)]
        hidden_sizes: Option<Vec<usize>>,
        #[serde(default)]
        l1: Option<f64>,
        #[serde(default)]
        l2: Option<f64>,
        #[serde(default)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, untagged)]
pub enum MetaEntry {
    Architecture {
        model: String,
        #[serde(default)]
        seed: Option<u64>,
    },
    Head {
        #[serde(default)]
        hidden: Option<usize>,
        #[serde(default)]
        keep_prob: Option<f64>,
        #[serde(default)]
        seed: Option<u64>,
    },
}

impl MemberEntry {
    /// Architecture spec with the entry's overrides applied; `None` for
    /// checkpoint members.
    pub fn architecture(&self) -> Result<Option<ArchitectureSpec>, String> {
        match self {
            MemberEntry::Checkpoint { .. } => Ok(None),
            MemberEntry::Architecture {
                model,
                mixtures,
                keep_prob,
                hidden_sizes,
                l1,
                l2,
                ..
            } => {
                let name = model.parse().map_err(|e: ModelZooError| e.to_string())?;
                let mut spec = ArchitectureSpec::new(name);
                if let Some(m) = mixtures {
                    spec.num_mixtures = *m;
                }
                if let Some(q) = keep_prob {
                    spec.keep_prob = *q;
                }
                if let Some(h) = hidden_sizes {
                    spec.hidden_sizes = h.clone();
                }
                match (l1, l2) {
                    (Some(_), Some(_)) => {
                        return Err(format!("member {model:?} sets both l1 and l2"))
                    }
                    (Some(p), None) => spec.reg = RegConfig::l1(*p),
                    (None, Some(p)) => spec.reg = RegConfig::l2(*p),
                    (None, None) => {}
                }
                Ok(Some(spec))
            }
        }
    }

    /// Explicit initialization seed, when the entry carries one.
    pub fn seed(&self) -> Option<u64> {
        match self {
            MemberEntry::Checkpoint { .. } => None,
            MemberEntry::Architecture { seed, .. } => *seed,
        }
    }
}
