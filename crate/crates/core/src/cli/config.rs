//! Flat `key = value` experiment configuration with two built-in profiles.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attack::{AttackTarget, PatchAttackConfig, PgdConfig, UniversalAttackConfig};
use crate::data::{load_cifar10_splits, synthetic_splits, Splits, SyntheticParams};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{ConmanAttack, FpConfig, FpMode, LrSchedule, TrainConfig, Weighting};

/// Environment variable overriding `out_dir`.
pub const OUT_DIR_ENV: &str = "ADVGAME_OUT_DIR";

/// Name of the resolved-config echo written into the output directory.
pub const RESOLVED_NAME: &str = "config.resolved";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Synthetic 16x16 data and the `tiny` network; minutes of CPU.
    Desk,
    /// CIFAR-10 binaries and the VGG-style network.
    Cifar10,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Universal,
    Patch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Directory of the CIFAR-10 binary batches; required by `cifar10`.
    pub data_dir: Option<PathBuf>,
    pub model: String,
    pub classes: usize,
    pub image_side: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub synthetic: SyntheticParams,
    pub outer_iterations: usize,
    pub inner_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub fp_mode: FpMode,
    pub weighting: Weighting,
    pub attack: AttackKind,
    pub attack_target: AttackTarget,
    /// Universal budget in 0..255 pixel units.
    pub epsilon_pixels: f64,
    pub attack_alpha: f64,
    pub attack_iterations: usize,
    pub attack_batch_size: usize,
    /// `None` means the image side.
    pub patch_side: Option<usize>,
    pub patch_chi: f64,
    pub patch_theta_degrees: f64,
    pub patch_placements: usize,
    pub patch_alpha: f64,
    pub patch_iterations: usize,
    pub patch_batch_size: usize,
    pub patch_lambda: f64,
    pub target_class: Option<usize>,
    pub eval_alpha: f64,
    pub eval_iterations: usize,
    pub eval_patch_iterations: usize,
    /// `None` means `min(N, 2000)` per split.
    pub eval_samples: Option<usize>,
    pub pgd_steps: usize,
    pub pgd_step_pixels: f64,
    pub pgd_random_init: bool,
    pub record_time: bool,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            seed: 1,
            out_dir: PathBuf::from("runs/desk"),
            data_dir: None,
            model: "tiny".into(),
            classes: 10,
            image_side: 16,
            train_per_class: 200,
            eval_per_class: 100,
            synthetic: SyntheticParams::default(),
            outer_iterations: 8,
            inner_steps: 300,
            batch_size: 64,
            learning_rate: 0.01,
            lr_decay: 0.1,
            lr_milestones: vec![720, 1440, 2160],
            momentum: 0.9,
            weight_decay: 2e-4,
            fp_mode: FpMode::Approximate,
            weighting: Weighting::Literal,
            attack: AttackKind::Universal,
            attack_target: AttackTarget::Pool,
            epsilon_pixels: 16.0,
            attack_alpha: 1e-3,
            attack_iterations: 200,
            attack_batch_size: 100,
            patch_side: None,
            patch_chi: 0.4,
            patch_theta_degrees: 20.0,
            patch_placements: 4,
            patch_alpha: 1.0,
            patch_iterations: 100,
            patch_batch_size: 32,
            patch_lambda: 0.0,
            target_class: None,
            eval_alpha: 4e-4,
            eval_iterations: 2000,
            eval_patch_iterations: 200,
            eval_samples: None,
            pgd_steps: 7,
            pgd_step_pixels: 4.0,
            pgd_random_init: true,
            record_time: false,
        }
    }

    pub fn cifar10() -> Self {
        Self {
            profile: Profile::Cifar10,
            out_dir: PathBuf::from("runs/cifar10"),
            model: "paper-vgg".into(),
            image_side: 32,
            outer_iterations: 50,
            inner_steps: 10_000,
            batch_size: 256,
            learning_rate: 0.01,
            lr_milestones: vec![150_000, 300_000, 450_000],
            attack_alpha: 2e-5,
            attack_iterations: 20_000,
            patch_iterations: 10_000,
            patch_batch_size: 100,
            eval_alpha: 2e-5,
            eval_iterations: 20_000,
            eval_patch_iterations: 10_000,
            ..Self::desk()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Cifar10 => Self::cifar10(),
        }
    }

    /// Universal budget as a fraction of the pixel range.
    pub fn epsilon(&self) -> f64 {
        self.epsilon_pixels / 255.0
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = |what: &str| Error::Config(format!("`{key}`: cannot parse `{v}` as {what}"));
        macro_rules! num {
            ($t:ty) => {
                v.parse::<$t>().map_err(|_| bad(stringify!($t)))?
            };
        }
        let opt_usize = |v: &str| -> Result<Option<usize>> {
            match v {
                "auto" | "none" => Ok(None),
                s => s.parse().map(Some).map_err(|_| bad("usize or `none`")),
            }
        };
        match key {
            "profile" => self.profile = v.parse()?,
            "seed" => self.seed = num!(u64),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "model" => self.model = v.to_string(),
            "classes" => self.classes = num!(usize),
            "image_side" => self.image_side = num!(usize),
            "train_per_class" => self.train_per_class = num!(usize),
            "eval_per_class" => self.eval_per_class = num!(usize),
            "synthetic_shape_min" => self.synthetic.shape_min = num!(f64),
            "synthetic_shape_max" => self.synthetic.shape_max = num!(f64),
            "synthetic_shape_jitter" => self.synthetic.shape_jitter = num!(f64),
            "synthetic_tint" => self.synthetic.tint = num!(f64),
            "synthetic_noise" => self.synthetic.noise = num!(f64),
            "synthetic_brightness" => self.synthetic.brightness = num!(f64),
            "outer_iterations" => self.outer_iterations = num!(usize),
            "inner_steps" => self.inner_steps = num!(usize),
            "batch_size" => self.batch_size = num!(usize),
            "learning_rate" => self.learning_rate = num!(f64),
            "lr_decay" => self.lr_decay = num!(f64),
            "lr_milestones" => {
                self.lr_milestones = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|s| s.trim().parse().map_err(|_| bad("comma-separated step list")))
                        .collect::<Result<_>>()?
                }
            }
            "momentum" => self.momentum = num!(f64),
            "weight_decay" => self.weight_decay = num!(f64),
            "fp_mode" => {
                self.fp_mode = match v {
                    "approximate" => FpMode::Approximate,
                    "exact" => FpMode::Exact,
                    _ => return Err(bad("`approximate` or `exact`")),
                }
            }
            "weighting" => {
                self.weighting = match v {
                    "literal" => Weighting::Literal,
                    "uniform" => Weighting::Uniform,
                    _ => return Err(bad("`literal` or `uniform`")),
                }
            }
            "attack" => self.attack = v.parse()?,
            "attack_target" => {
                self.attack_target = match v {
                    "pool" => AttackTarget::Pool,
                    "single" => AttackTarget::Single,
                    _ => return Err(bad("`pool` or `single`")),
                }
            }
            "epsilon_pixels" => self.epsilon_pixels = num!(f64),
            "attack_alpha" => self.attack_alpha = num!(f64),
            "attack_iterations" => self.attack_iterations = num!(usize),
            "attack_batch_size" => self.attack_batch_size = num!(usize),
            "patch_side" => self.patch_side = opt_usize(v)?,
            "patch_chi" => self.patch_chi = num!(f64),
            "patch_theta_degrees" => self.patch_theta_degrees = num!(f64),
            "patch_placements" => self.patch_placements = num!(usize),
            "patch_alpha" => self.patch_alpha = num!(f64),
            "patch_iterations" => self.patch_iterations = num!(usize),
            "patch_batch_size" => self.patch_batch_size = num!(usize),
            "patch_lambda" => self.patch_lambda = num!(f64),
            "target_class" => self.target_class = opt_usize(v)?,
            "eval_alpha" => self.eval_alpha = num!(f64),
            "eval_iterations" => self.eval_iterations = num!(usize),
            "eval_patch_iterations" => self.eval_patch_iterations = num!(usize),
            "eval_samples" => self.eval_samples = opt_usize(v)?,
            "pgd_steps" => self.pgd_steps = num!(usize),
            "pgd_step_pixels" => self.pgd_step_pixels = num!(f64),
            "pgd_random_init" => self.pgd_random_init = num!(bool),
            "record_time" => self.record_time = num!(bool),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its text form, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let opt = |o: Option<usize>, none: &str| o.map_or(none.to_string(), |n| n.to_string());
        let s = &self.synthetic;
        vec![
            ("profile", self.profile.to_string()),
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("data_dir", self.data_dir.as_ref().map_or(String::new(), |p| p.display().to_string())),
            ("model", self.model.clone()),
            ("classes", self.classes.to_string()),
            ("image_side", self.image_side.to_string()),
            ("train_per_class", self.train_per_class.to_string()),
            ("eval_per_class", self.eval_per_class.to_string()),
            ("synthetic_shape_min", s.shape_min.to_string()),
            ("synthetic_shape_max", s.shape_max.to_string()),
            ("synthetic_shape_jitter", s.shape_jitter.to_string()),
            ("synthetic_tint", s.tint.to_string()),
            ("synthetic_noise", s.noise.to_string()),
            ("synthetic_brightness", s.brightness.to_string()),
            ("outer_iterations", self.outer_iterations.to_string()),
            ("inner_steps", self.inner_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            (
                "lr_milestones",
                self.lr_milestones.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            ),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            (
                "fp_mode",
                match self.fp_mode {
                    FpMode::Approximate => "approximate",
                    FpMode::Exact => "exact",
                }
                .into(),
            ),
            (
                "weighting",
                match self.weighting {
                    Weighting::Literal => "literal",
                    Weighting::Uniform => "uniform",
                }
                .into(),
            ),
            ("attack", self.attack.to_string()),
            (
                "attack_target",
                match self.attack_target {
                    AttackTarget::Pool => "pool",
                    AttackTarget::Single => "single",
                }
                .into(),
            ),
            ("epsilon_pixels", self.epsilon_pixels.to_string()),
            ("attack_alpha", self.attack_alpha.to_string()),
            ("attack_iterations", self.attack_iterations.to_string()),
            ("attack_batch_size", self.attack_batch_size.to_string()),
            ("patch_side", opt(self.patch_side, "auto")),
            ("patch_chi", self.patch_chi.to_string()),
            ("patch_theta_degrees", self.patch_theta_degrees.to_string()),
            ("patch_placements", self.patch_placements.to_string()),
            ("patch_alpha", self.patch_alpha.to_string()),
            ("patch_iterations", self.patch_iterations.to_string()),
            ("patch_batch_size", self.patch_batch_size.to_string()),
            ("patch_lambda", self.patch_lambda.to_string()),
            ("target_class", opt(self.target_class, "none")),
            ("eval_alpha", self.eval_alpha.to_string()),
            ("eval_iterations", self.eval_iterations.to_string()),
            ("eval_patch_iterations", self.eval_patch_iterations.to_string()),
            ("eval_samples", opt(self.eval_samples, "auto")),
            ("pgd_steps", self.pgd_steps.to_string()),
            ("pgd_step_pixels", self.pgd_step_pixels.to_string()),
            ("pgd_random_init", self.pgd_random_init.to_string()),
            ("record_time", self.record_time.to_string()),
        ]
    }

    /// The resolved config in the file format.
    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Builds a config from `key = value` pairs applied in order on top of
    /// the profile named by the last `profile` pair (default `desk`).
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let profile = match pairs.iter().rev().find(|(k, _)| k == "profile") {
            Some((_, v)) => v.trim().parse()?,
            None => Profile::Desk,
        };
        let mut cfg = Self::for_profile(profile);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses the file format: one `key = value` per line, `#` starts a
    /// comment, blank lines are skipped.
    pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&Self::parse_pairs(text)?)
    }

    /// Cross-field checks and the per-profile required keys.
    pub fn validate(&self) -> Result<()> {
        if self.profile == Profile::Cifar10 && self.data_dir.is_none() {
            return Err(Error::Config("profile `cifar10` needs `data_dir`".into()));
        }
        if self.profile == Profile::Cifar10 && (self.classes != 10 || self.image_side != 32) {
            return Err(Error::Config("CIFAR-10 has 10 classes of 32x32 images".into()));
        }
        if !(self.epsilon_pixels >= 0.0 && self.epsilon_pixels.is_finite()) {
            return Err(Error::Config(format!("epsilon_pixels {} must be non-negative", self.epsilon_pixels)));
        }
        self.model_config()?.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.training_attack().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.eval_attack(self.attack).validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.attack == AttackKind::Patch {
            if let Some(t) = self.target_class {
                if t >= self.classes {
                    return Err(Error::Config(format!("target_class {t} with {} classes", self.classes)));
                }
            }
        }
        self.pgd().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::named(&self.model, 3, self.image_side, self.classes)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            outer_iterations: self.outer_iterations,
            inner_steps: self.inner_steps,
            batch_size: self.batch_size,
            schedule: LrSchedule {
                initial: self.learning_rate,
                decay: self.lr_decay,
                milestones: self.lr_milestones.clone(),
            },
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
            checkpoint_dir: Some(self.checkpoint_dir()),
            record_trajectory: false,
        }
    }

    fn universal(&self, alpha: f64, iterations: usize) -> UniversalAttackConfig {
        UniversalAttackConfig {
            epsilon: self.epsilon(),
            alpha,
            iterations,
            batch_size: self.attack_batch_size,
            target: self.attack_target,
        }
    }

    /// Patch attack with the given fixed-class settings.
    pub fn patch(&self, iterations: usize, target_class: Option<usize>, lambda: f64) -> PatchAttackConfig {
        PatchAttackConfig {
            side: self.patch_side.unwrap_or(self.image_side),
            chi: self.patch_chi,
            theta_max: self.patch_theta_degrees.to_radians(),
            placements: self.patch_placements,
            alpha: self.patch_alpha,
            iterations,
            batch_size: self.patch_batch_size,
            target_class,
            lambda,
        }
    }

    /// The conman's attack during fictitious play.
    pub fn training_attack(&self) -> ConmanAttack {
        match self.attack {
            AttackKind::Universal => ConmanAttack::Universal(self.universal(self.attack_alpha, self.attack_iterations)),
            AttackKind::Patch => {
                ConmanAttack::Patch(self.patch(self.patch_iterations, self.target_class, self.patch_lambda))
            }
        }
    }

    /// The held-out evaluation attack of the given kind.
    pub fn eval_attack(&self, kind: AttackKind) -> ConmanAttack {
        match kind {
            AttackKind::Universal => ConmanAttack::Universal(self.universal(self.eval_alpha, self.eval_iterations)),
            AttackKind::Patch => {
                ConmanAttack::Patch(self.patch(self.eval_patch_iterations, self.target_class, self.patch_lambda))
            }
        }
    }

    pub fn fp_config(&self) -> FpConfig {
        FpConfig {
            train: self.train_config(),
            attack: self.training_attack(),
            mode: self.fp_mode,
            weighting: self.weighting,
        }
    }

    pub fn pgd(&self) -> PgdConfig {
        PgdConfig {
            epsilon: self.epsilon(),
            step_size: self.pgd_step_pixels / 255.0,
            steps: self.pgd_steps,
            random_init: self.pgd_random_init,
        }
    }

    /// Synthetic splits for `desk`, the CIFAR-10 binaries for `cifar10`.
    pub fn load_splits(&self) -> Result<Splits> {
        match self.profile {
            Profile::Desk => synthetic_splits(
                &self.synthetic,
                self.classes,
                self.train_per_class,
                self.eval_per_class,
                self.image_side,
                self.seed,
            ),
            Profile::Cifar10 => {
                let dir = self.data_dir.as_deref().ok_or_else(|| Error::Config("missing `data_dir`".into()))?;
                load_cifar10_splits(dir)
            }
        }
    }

    /// Writes the resolved config into the output directory.
    pub fn echo(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join(RESOLVED_NAME);
        std::fs::write(&path, self.render())?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Cifar10 => "cifar10",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "cifar10" => Ok(Profile::Cifar10),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Universal => "universal",
            AttackKind::Patch => "patch",
        })
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "universal" => Ok(AttackKind::Universal),
            "patch" => Ok(AttackKind::Patch),
            other => Err(Error::Config(format!("unknown attack kind `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_desk_defaults() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::desk());
        assert_eq!(ExperimentConfig::parse("# nothing\n\n").unwrap(), ExperimentConfig::desk());
    }

    #[test]
    fn epsilon_in_pixels() {
        let c = ExperimentConfig::parse("epsilon_pixels = 16").unwrap();
        assert_eq!(c.epsilon(), 16.0 / 255.0);
    }

    #[test]
    fn unknown_key_and_bad_value_rejected() {
        assert!(matches!(ExperimentConfig::parse("learning_rat = 0.1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("seed = minus one"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("just words"), Err(Error::Config(_))));
    }

    #[test]
    fn cifar10_needs_data_dir() {
        assert!(ExperimentConfig::parse("profile = cifar10").is_err());
        let c = ExperimentConfig::parse("profile = cifar10\ndata_dir = /data/cifar").unwrap();
        assert_eq!(c.inner_steps, 10_000);
        assert_eq!(c.model, "paper-vgg");
    }

    #[test]
    fn later_pairs_win() {
        let pairs = vec![("seed".to_string(), "3".to_string()), ("seed".to_string(), "9".to_string())];
        assert_eq!(ExperimentConfig::from_pairs(&pairs).unwrap().seed, 9);
    }

    #[test]
    fn render_round_trips() {
        let mut c = ExperimentConfig::desk();
        c.set("learning_rate", "0.1").unwrap();
        c.set("target_class", "3").unwrap();
        c.set("synthetic_tint", "0.0123456789").unwrap();
        c.set("lr_milestones", "5, 9").unwrap();
        assert_eq!(ExperimentConfig::parse(&c.render()).unwrap(), c);
        let cifar = ExperimentConfig::parse("profile = cifar10\ndata_dir = d").unwrap();
        assert_eq!(ExperimentConfig::parse(&cifar.render()).unwrap(), cifar);
    }
}
