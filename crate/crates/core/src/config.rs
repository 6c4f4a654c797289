//! Training configuration: defaults, validation, and the flat `key = value`
//! config-file grammar (one pair per line, `#` comments, booleans as
//! true/false, floats in decimal or scientific notation). Unknown keys are
//! rejected so typos cannot silently fall back to defaults.

use crate::error::{PgeError, Result};

/// Every hyperparameter of the engine. Field names are exactly the config
/// file keys.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Number of alternating D/G update pairs.
    pub steps: usize,
    /// Images per update; losses average over the batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Adam first/second moment coefficients.
    pub beta1: f64,
    pub beta2: f64,
    /// Weight λ_g of the graph-contrastive terms in the total objective.
    pub lambda_g: f64,
    /// infoNCE temperature τ.
    pub temperature: f64,
    /// GNN hop count L.
    pub hops: usize,
    /// Cosine threshold t for adjacency construction.
    pub threshold: f64,
    /// Patches sampled per encoder layer (N).
    pub patch_count: usize,
    /// Pooling levels P (0 disables pooling).
    pub pooling_levels: usize,
    /// Fraction of nodes kept per pooling level.
    pub keep_ratio: f64,
    /// Seed for data generation and per-step patch sampling.
    pub data_seed: u64,
    /// Seed for parameter initialization.
    pub model_seed: u64,
    /// Square input image extent (pixels).
    pub image_size: usize,
    /// Emit a metrics row every this many steps.
    pub log_interval: usize,
    /// Rewrite the checkpoint every this many steps (0 = only at the end).
    pub checkpoint_interval: usize,
    /// L2-normalize embeddings before infoNCE dot products.
    pub normalize_embeddings: bool,
    /// Divide pooling scores by ‖p‖ (original top-K pooling convention)
    /// instead of the raw pᵀz form.
    pub normalize_pool_scores: bool,
    /// Node embedding width d (output of W_l and head projections).
    pub embed_dim: usize,
    /// Hidden width of the two-layer projection heads.
    pub head_hidden: usize,
    /// Base channel width of the generator.
    pub gen_width: usize,
    /// Residual blocks in the generator bottleneck.
    pub res_blocks: usize,
    /// Base channel width of the discriminator.
    pub disc_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 1,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lambda_g: 1.0,
            temperature: 0.07,
            hops: 2,
            threshold: 0.1,
            patch_count: 256,
            pooling_levels: 1,
            keep_ratio: 0.25,
            data_seed: 7,
            model_seed: 11,
            image_size: 64,
            log_interval: 1,
            checkpoint_interval: 500,
            normalize_embeddings: true,
            normalize_pool_scores: false,
            embed_dim: 64,
            head_hidden: 64,
            gen_width: 16,
            res_blocks: 2,
            disc_width: 16,
        }
    }
}

impl TrainConfig {
    /// 16×16 toy instance used by gradient checking: same structural
    /// hyperparameters, desk-of-a-desk sizes.
    pub fn toy(&self) -> Self {
        let mut c = self.clone();
        c.image_size = 16;
        c.patch_count = 8;
        c.steps = 0;
        c
    }

    /// Grid extent of encoder tap `layer` for this image size (strides
    /// 2, 4, 4 overall).
    pub fn tap_extent(&self, layer: usize) -> usize {
        match layer {
            0 => self.image_size / 2,
            _ => self.image_size / 4,
        }
    }

    /// Pooled node count after `level` applications of keep_ratio
    /// (level 0 = unpooled N).
    pub fn nodes_at_level(&self, level: usize) -> usize {
        let mut n = self.patch_count;
        for _ in 0..level {
            n = (self.keep_ratio * n as f64).round() as usize;
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(PgeError::Config(msg));
        if self.batch_size == 0 {
            return fail("batch_size must be ≥ 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0,1), got {b}"));
            }
        }
        if !(self.lambda_g >= 0.0 && self.lambda_g.is_finite()) {
            return fail(format!("lambda_g must be ≥ 0, got {}", self.lambda_g));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(-1.0..=1.0).contains(&self.threshold) {
            return fail(format!("threshold must lie in [-1,1], got {}", self.threshold));
        }
        if self.patch_count < 2 {
            return fail(format!("patch_count must be ≥ 2, got {}", self.patch_count));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return fail(format!("keep_ratio must lie in (0,1], got {}", self.keep_ratio));
        }
        for level in 1..=self.pooling_levels {
            if self.nodes_at_level(level) < 2 {
                return fail(format!(
                    "keep_ratio {} leaves fewer than 2 nodes at pooling level {level} \
                     (a contrastive loss needs at least one negative)",
                    self.keep_ratio
                ));
            }
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return fail(format!(
                "image_size must be a multiple of 4 and ≥ 8, got {}",
                self.image_size
            ));
        }
        let min_grid = self.tap_extent(1) * self.tap_extent(1);
        if self.patch_count > min_grid {
            return fail(format!(
                "patch_count {} exceeds the {} cells of the coarsest encoder tap",
                self.patch_count, min_grid
            ));
        }
        if self.log_interval == 0 {
            return fail("log_interval must be ≥ 1".into());
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("head_hidden", self.head_hidden),
            ("gen_width", self.gen_width),
            ("disc_width", self.disc_width),
        ] {
            if v == 0 {
                return fail(format!("{name} must be ≥ 1"));
            }
        }
        Ok(())
    }

    /// Serialize as the config-file grammar; `parse` of the result is
    /// lossless.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# resolved engine configuration\n");
        let kv = |k: &str, v: String| format!("{k} = {v}\n");
        s += &kv("steps", self.steps.to_string());
        s += &kv("batch_size", self.batch_size.to_string());
        s += &kv("learning_rate", fmt_f64(self.learning_rate));
        s += &kv("beta1", fmt_f64(self.beta1));
        s += &kv("beta2", fmt_f64(self.beta2));
        s += &kv("lambda_g", fmt_f64(self.lambda_g));
        s += &kv("temperature", fmt_f64(self.temperature));
        s += &kv("hops", self.hops.to_string());
        s += &kv("threshold", fmt_f64(self.threshold));
        s += &kv("patch_count", self.patch_count.to_string());
        s += &kv("pooling_levels", self.pooling_levels.to_string());
        s += &kv("keep_ratio", fmt_f64(self.keep_ratio));
        s += &kv("data_seed", self.data_seed.to_string());
        s += &kv("model_seed", self.model_seed.to_string());
        s += &kv("image_size", self.image_size.to_string());
        s += &kv("log_interval", self.log_interval.to_string());
        s += &kv("checkpoint_interval", self.checkpoint_interval.to_string());
        s += &kv("normalize_embeddings", self.normalize_embeddings.to_string());
        s += &kv("normalize_pool_scores", self.normalize_pool_scores.to_string());
        s += &kv("embed_dim", self.embed_dim.to_string());
        s += &kv("head_hidden", self.head_hidden.to_string());
        s += &kv("gen_width", self.gen_width.to_string());
        s += &kv("res_blocks", self.res_blocks.to_string());
        s += &kv("disc_width", self.disc_width.to_string());
        s
    }

    /// Parse the config-file grammar over the defaults. Unknown keys,
    /// duplicate keys, and unparsable values are config errors; the result
    /// is validated before being returned.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(PgeError::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(PgeError::Config(format!(
                    "line {}: duplicate key {key}",
                    lineno + 1
                )));
            }
            seen.push(key.to_string());
            cfg.set(key, value).map_err(|e| {
                PgeError::Config(format!("line {}: {e}", lineno + 1))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                PgeError::Config(format!("cannot parse value {value:?} for key {key}"))
            })
        }
        match key {
            "steps" => self.steps = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "learning_rate" => self.learning_rate = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "lambda_g" => self.lambda_g = p(key, value)?,
            "temperature" => self.temperature = p(key, value)?,
            "hops" => self.hops = p(key, value)?,
            "threshold" => self.threshold = p(key, value)?,
            "patch_count" => self.patch_count = p(key, value)?,
            "pooling_levels" => self.pooling_levels = p(key, value)?,
            "keep_ratio" => self.keep_ratio = p(key, value)?,
            "data_seed" => self.data_seed = p(key, value)?,
            "model_seed" => self.model_seed = p(key, value)?,
            "image_size" => self.image_size = p(key, value)?,
            "log_interval" => self.log_interval = p(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = p(key, value)?,
            "normalize_embeddings" => self.normalize_embeddings = p(key, value)?,
            "normalize_pool_scores" => self.normalize_pool_scores = p(key, value)?,
            "embed_dim" => self.embed_dim = p(key, value)?,
            "head_hidden" => self.head_hidden = p(key, value)?,
            "gen_width" => self.gen_width = p(key, value)?,
            "res_blocks" => self.res_blocks = p(key, value)?,
            "disc_width" => self.disc_width = p(key, value)?,
            _ => {
                return Err(PgeError::Config(format!("unknown key {key}")));
            }
        }
        Ok(())
    }
}

/// Shortest decimal form that round-trips the exact f64.
fn fmt_f64(x: f64) -> String {
    let s = format!("{x}");
    debug_assert_eq!(s.parse::<f64>().ok(), Some(x));
    s
}
