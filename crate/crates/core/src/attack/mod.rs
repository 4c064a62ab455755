//! Perturbation crafting: universal L∞ perturbations, adversarial patches
//! and per-sample PGD examples.

mod patch;
mod pgd;
mod universal;

pub use patch::{learn_patch, patch_objective, patch_step, PatchAttackConfig, PatchObjective};
pub use pgd::{pgd_per_sample, PgdConfig};
pub use universal::{
    input_gradients, learn_universal, project_linf, sign_update, universal_step, AttackTarget,
    UniversalAttackConfig,
};
