use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fields::{ModelConfig, WeightMode};
use crate::kv::{join, KeyValues};
use crate::nets::{AdamConfig, EncodingConfig};

/// Optimization schedule, loss weights and network sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Epochs of weight pretraining, stage 2 and stage 3.
    pub epochs: [usize; 3],
    pub lr: f64,
    pub pretrain_lr: f64,
    /// Per-epoch learning-rate multiplier within a stage.
    pub lr_decay: f64,
    pub adam: AdamConfig,
    pub lambda_sdf: f64,
    pub lambda_norm: f64,
    pub lambda_reg: f64,
    /// Normal loss applies where `|d*| < delta`.
    pub delta: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Relative validation improvement below which the normal net starts.
    pub norm_trigger: f64,
    /// The normal net starts no later than this many epochs before the end.
    pub min_normal_epochs: usize,
    /// Validation samples kept per held-out frame; 0 keeps all.
    pub val_samples: usize,
    /// Surface points per training frame supervising the weight pretraining.
    pub pretrain_points: usize,
    /// Rows per parallel work unit. Results depend on it, not on thread count.
    pub chunk: usize,
    pub weight_mode: WeightMode,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: [10, 40, 40],
            lr: 5e-4,
            pretrain_lr: 1e-3,
            lr_decay: 0.97,
            adam: AdamConfig::default(),
            lambda_sdf: 1.0,
            lambda_norm: 0.1,
            lambda_reg: 1e-3,
            delta: 0.02,
            batch_size: 2048,
            seed: 0,
            norm_trigger: 0.01,
            min_normal_epochs: 5,
            val_samples: 2000,
            pretrain_points: 2000,
            chunk: 512,
            weight_mode: WeightMode::Learned,
            model: ModelConfig::default(),
        }
    }
}

const KEYS: [&str; 28] = [
    "epochs",
    "lr",
    "pretrain_lr",
    "lr_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "lambda_sdf",
    "lambda_norm",
    "lambda_reg",
    "delta",
    "batch_size",
    "seed",
    "norm_trigger",
    "min_normal_epochs",
    "val_samples",
    "pretrain_points",
    "chunk",
    "weight_mode",
    "frequencies",
    "include_input",
    "weight_hidden",
    "displacement_hidden",
    "sdf_hidden",
    "normal_hidden",
    "shape_hidden",
    "softplus_beta",
    "sdf_init_bias",
];

impl TrainConfig {
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("epochs", join(&self.epochs));
        put("lr", self.lr.to_string());
        put("pretrain_lr", self.pretrain_lr.to_string());
        put("lr_decay", self.lr_decay.to_string());
        put("beta1", self.adam.beta1.to_string());
        put("beta2", self.adam.beta2.to_string());
        put("adam_eps", self.adam.eps.to_string());
        put("lambda_sdf", self.lambda_sdf.to_string());
        put("lambda_norm", self.lambda_norm.to_string());
        put("lambda_reg", self.lambda_reg.to_string());
        put("delta", self.delta.to_string());
        put("batch_size", self.batch_size.to_string());
        put("seed", self.seed.to_string());
        put("norm_trigger", self.norm_trigger.to_string());
        put("min_normal_epochs", self.min_normal_epochs.to_string());
        put("val_samples", self.val_samples.to_string());
        put("pretrain_points", self.pretrain_points.to_string());
        put("chunk", self.chunk.to_string());
        put("weight_mode", self.weight_mode.as_str().to_string());
        put("frequencies", m.encoding.frequencies.to_string());
        put("include_input", m.encoding.include_input.to_string());
        put("weight_hidden", join(&m.weight_hidden));
        put("displacement_hidden", join(&m.displacement_hidden));
        put("sdf_hidden", join(&m.sdf_hidden));
        put("normal_hidden", join(&m.normal_hidden));
        put("shape_hidden", join(&m.shape_hidden));
        put("softplus_beta", m.softplus_beta.to_string());
        put("sdf_init_bias", m.sdf_init_bias.to_string());
        s
    }

    /// Keys present override the defaults; unknown keys are rejected.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&KEYS)?;
        let d = TrainConfig::default();
        let epochs = match kv.list::<usize>("epochs")? {
            None => d.epochs,
            Some(v) if v.len() == 3 => [v[0], v[1], v[2]],
            Some(v) => return Err(Error::config("epochs", format!("expected three values, got {}", v.len()))),
        };
        let weight_mode = match kv.raw("weight_mode") {
            None => d.weight_mode,
            Some(s) => WeightMode::parse(s)
                .ok_or_else(|| Error::config("weight_mode", format!("`{s}` is not learned or nn-weights")))?,
        };
        let dm = &d.model;
        let model = ModelConfig {
            encoding: EncodingConfig {
                frequencies: kv.get("frequencies")?.unwrap_or(dm.encoding.frequencies),
                include_input: kv.get("include_input")?.unwrap_or(dm.encoding.include_input),
            },
            weight_hidden: kv.list("weight_hidden")?.unwrap_or_else(|| dm.weight_hidden.clone()),
            displacement_hidden: kv.list("displacement_hidden")?.unwrap_or_else(|| dm.displacement_hidden.clone()),
            sdf_hidden: kv.list("sdf_hidden")?.unwrap_or_else(|| dm.sdf_hidden.clone()),
            normal_hidden: kv.list("normal_hidden")?.unwrap_or_else(|| dm.normal_hidden.clone()),
            shape_hidden: kv.list("shape_hidden")?.unwrap_or_else(|| dm.shape_hidden.clone()),
            softplus_beta: kv.get("softplus_beta")?.unwrap_or(dm.softplus_beta),
            sdf_init_bias: kv.get("sdf_init_bias")?.unwrap_or(dm.sdf_init_bias),
            shape_dim: 0,
        };
        let c = TrainConfig {
            epochs,
            lr: kv.get("lr")?.unwrap_or(d.lr),
            pretrain_lr: kv.get("pretrain_lr")?.unwrap_or(d.pretrain_lr),
            lr_decay: kv.get("lr_decay")?.unwrap_or(d.lr_decay),
            adam: AdamConfig {
                lr: d.adam.lr,
                beta1: kv.get("beta1")?.unwrap_or(d.adam.beta1),
                beta2: kv.get("beta2")?.unwrap_or(d.adam.beta2),
                eps: kv.get("adam_eps")?.unwrap_or(d.adam.eps),
            },
            lambda_sdf: kv.get("lambda_sdf")?.unwrap_or(d.lambda_sdf),
            lambda_norm: kv.get("lambda_norm")?.unwrap_or(d.lambda_norm),
            lambda_reg: kv.get("lambda_reg")?.unwrap_or(d.lambda_reg),
            delta: kv.get("delta")?.unwrap_or(d.delta),
            batch_size: kv.get("batch_size")?.unwrap_or(d.batch_size),
            seed: kv.get("seed")?.unwrap_or(d.seed),
            norm_trigger: kv.get("norm_trigger")?.unwrap_or(d.norm_trigger),
            min_normal_epochs: kv.get("min_normal_epochs")?.unwrap_or(d.min_normal_epochs),
            val_samples: kv.get("val_samples")?.unwrap_or(d.val_samples),
            pretrain_points: kv.get("pretrain_points")?.unwrap_or(d.pretrain_points),
            chunk: kv.get("chunk")?.unwrap_or(d.chunk),
            weight_mode,
            model,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::read(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(name, format!("{v} is not positive")))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(name, format!("{v} is negative")))
            }
        };
        positive("lr", self.lr)?;
        positive("pretrain_lr", self.pretrain_lr)?;
        positive("lr_decay", self.lr_decay)?;
        positive("adam_eps", self.adam.eps)?;
        for (n, b) in [("beta1", self.adam.beta1), ("beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(n, format!("{b} is outside [0, 1)")));
            }
        }
        non_negative("lambda_sdf", self.lambda_sdf)?;
        non_negative("lambda_norm", self.lambda_norm)?;
        non_negative("lambda_reg", self.lambda_reg)?;
        positive("delta", self.delta)?;
        non_negative("norm_trigger", self.norm_trigger)?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.chunk == 0 {
            return Err(Error::config("chunk", "must be positive"));
        }
        if self.weight_mode == WeightMode::Learned && self.epochs[1] + self.epochs[2] > 0 && self.pretrain_points == 0 && self.epochs[0] > 0 {
            return Err(Error::config("pretrain_points", "pretraining needs points"));
        }
        let m = &self.model;
        for (n, h) in [
            ("weight_hidden", &m.weight_hidden),
            ("displacement_hidden", &m.displacement_hidden),
            ("sdf_hidden", &m.sdf_hidden),
            ("normal_hidden", &m.normal_hidden),
            ("shape_hidden", &m.shape_hidden),
        ] {
            if h.contains(&0) {
                return Err(Error::config(n, "zero-width layer"));
            }
        }
        positive("softplus_beta", m.softplus_beta)?;
        Ok(())
    }

    /// Digest of everything that affects training results.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_text());
        h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.epochs = [1, 2, 3];
        c.weight_mode = WeightMode::NearestSurface;
        c.model.sdf_hidden = vec![32, 16];
        let kv = KeyValues::parse(&c.to_text(), Path::new("t")).unwrap();
        assert_eq!(TrainConfig::from_kv(&kv).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        let p = Path::new("t");
        assert!(TrainConfig::from_kv(&KeyValues::parse("learning_rate = 1", p).unwrap()).is_err());
        assert!(matches!(
            TrainConfig::from_kv(&KeyValues::parse("delta = 0", p).unwrap()),
            Err(Error::Config { field, .. }) if field == "delta"
        ));
        assert!(TrainConfig::from_kv(&KeyValues::parse("epochs = 1, 2", p).unwrap()).is_err());
    }
}
