use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Architecture hyperparameters of the whole codec.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch_size: usize,
    /// Window side in tokens.
    pub window_side: usize,
    pub latents_per_window: usize,
    /// Token width `c`.
    pub dim: usize,
    pub heads: usize,
    pub n_layers: usize,
    pub vit_blocks_per_layer: usize,
    pub rwkv_blocks_per_layer: usize,
    pub ratio: usize,
    pub c_y: usize,
    pub c_z: usize,
    /// Bi-RWKV blocks in the latent analysis and synthesis transforms.
    pub rcm_blocks: usize,
    /// Bi-RWKV blocks in the hyper analysis network.
    pub hyper_blocks: usize,
    /// Channel width of the context model stages.
    pub ctx_dim: usize,
    /// Channels between the two pixel generator stages.
    pub generator_dim: usize,
    /// Codebook size of the stage-1 alignment targets.
    pub target_codebook: usize,
    /// Pixel side of one alignment target code.
    pub target_block: usize,
}

impl ModelConfig {
    /// Dimensions used in the original large-scale setting.
    pub fn paper() -> Self {
        Self {
            dim: 1024,
            heads: 8,
            c_y: 320,
            c_z: 14,
            ctx_dim: 320,
            generator_dim: 256,
            ..Self::desk()
        }
    }

    /// Desk-scale default.
    pub fn desk() -> Self {
        Self {
            patch_size: 16,
            window_side: 16,
            latents_per_window: 32,
            dim: 32,
            heads: 2,
            n_layers: 2,
            vit_blocks_per_layer: 2,
            rwkv_blocks_per_layer: 1,
            ratio: 4,
            c_y: 16,
            c_z: 6,
            rcm_blocks: 1,
            hyper_blocks: 2,
            ctx_dim: 16,
            generator_dim: 16,
            target_codebook: 64,
            target_block: 8,
        }
    }

    /// Smallest configuration that keeps every structural constraint; used
    /// by tests and quick training runs.
    pub fn tiny() -> Self {
        Self {
            dim: 16,
            heads: 2,
            n_layers: 1,
            vit_blocks_per_layer: 1,
            ratio: 2,
            c_y: 8,
            c_z: 6,
            ctx_dim: 8,
            generator_dim: 8,
            ..Self::desk()
        }
    }

    /// Same weights layout without the global Bi-RWKV stage.
    pub fn without_rwkv(&self) -> Self {
        Self { rwkv_blocks_per_layer: 0, ..self.clone() }
    }

    pub fn window_pixels(&self) -> usize {
        self.patch_size * self.window_side
    }

    pub fn patch_tokens_per_window(&self) -> usize {
        self.window_side * self.window_side
    }

    pub fn tokens_per_window(&self) -> usize {
        self.patch_tokens_per_window() + self.latents_per_window
    }

    /// Number of windows for an image, or an error if a side is not a
    /// multiple of the window size in pixels.
    pub fn windows_for(&self, height: usize, width: usize) -> Result<usize> {
        let m = self.window_pixels();
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            return Err(Error::Dimensions { width, height, multiple: m });
        }
        Ok((height / m) * (width / m))
    }

    /// Alignment target codes per patch token.
    pub fn codes_per_token(&self) -> usize {
        let r = self.patch_size / self.target_block;
        r * r
    }

    pub fn latent_tokens_for(&self, height: usize, width: usize) -> Result<usize> {
        Ok(self.windows_for(height, width)? * self.latents_per_window)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_size", self.patch_size),
            ("window_side", self.window_side),
            ("latents_per_window", self.latents_per_window),
            ("dim", self.dim),
            ("heads", self.heads),
            ("ratio", self.ratio),
            ("c_y", self.c_y),
            ("c_z", self.c_z),
            ("ctx_dim", self.ctx_dim),
            ("generator_dim", self.generator_dim),
            ("target_codebook", self.target_codebook),
            ("target_block", self.target_block),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!("heads {} must divide dim {}", self.heads, self.dim)));
        }
        if self.c_y < 2 {
            return Err(Error::InvalidArgument("c_y must be at least 2 for two channel groups".into()));
        }
        if self.c_z > 32 {
            return Err(Error::InvalidArgument("c_z above 32 does not fit the index view".into()));
        }
        if self.patch_size % 4 != 0 || self.patch_size / 4 == 0 {
            return Err(Error::InvalidArgument("patch_size must be a multiple of 4 for the generator".into()));
        }
        if self.patch_size % self.target_block != 0 {
            return Err(Error::InvalidArgument("target_block must divide patch_size".into()));
        }
        Ok(())
    }

    fn fields(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("patch_size", self.patch_size),
            ("window_side", self.window_side),
            ("latents_per_window", self.latents_per_window),
            ("dim", self.dim),
            ("heads", self.heads),
            ("n_layers", self.n_layers),
            ("vit_blocks_per_layer", self.vit_blocks_per_layer),
            ("rwkv_blocks_per_layer", self.rwkv_blocks_per_layer),
            ("ratio", self.ratio),
            ("c_y", self.c_y),
            ("c_z", self.c_z),
            ("rcm_blocks", self.rcm_blocks),
            ("hyper_blocks", self.hyper_blocks),
            ("ctx_dim", self.ctx_dim),
            ("generator_dim", self.generator_dim),
            ("target_codebook", self.target_codebook),
            ("target_block", self.target_block),
        ]
    }

    fn field_mut(&mut self, key: &str) -> Option<&mut usize> {
        Some(match key {
            "patch_size" => &mut self.patch_size,
            "window_side" => &mut self.window_side,
            "latents_per_window" => &mut self.latents_per_window,
            "dim" => &mut self.dim,
            "heads" => &mut self.heads,
            "n_layers" => &mut self.n_layers,
            "vit_blocks_per_layer" => &mut self.vit_blocks_per_layer,
            "rwkv_blocks_per_layer" => &mut self.rwkv_blocks_per_layer,
            "ratio" => &mut self.ratio,
            "c_y" => &mut self.c_y,
            "c_z" => &mut self.c_z,
            "rcm_blocks" => &mut self.rcm_blocks,
            "hyper_blocks" => &mut self.hyper_blocks,
            "ctx_dim" => &mut self.ctx_dim,
            "generator_dim" => &mut self.generator_dim,
            "target_codebook" => &mut self.target_codebook,
            "target_block" => &mut self.target_block,
            _ => return None,
        })
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Applies recognized keys from a parsed `key=value` map on top of
    /// `self`, removing them from the map.
    pub fn apply_kv(&mut self, map: &mut BTreeMap<String, String>) -> Result<()> {
        if let Some(preset) = map.remove("preset") {
            *self = match preset.as_str() {
                "paper" => Self::paper(),
                "desk" => Self::desk(),
                "tiny" => Self::tiny(),
                other => return Err(Error::Parse(format!("unknown preset {other}"))),
            };
        }
        let keys: Vec<String> = map.keys().cloned().collect();
        for key in keys {
            if let Some(slot) = self.field_mut(&key) {
                let raw = map.remove(&key).expect("key present");
                *slot = raw.parse().map_err(|_| Error::Parse(format!("{key}: expected an integer, got {raw:?}")))?;
            }
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = parse_kv(text)?;
        let mut cfg = Self::desk();
        cfg.apply_kv(&mut map)?;
        if let Some(k) = map.keys().next() {
            return Err(Error::Parse(format!("unknown model key {k}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", n + 1)))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Parse(format!("line {}: duplicate key {}", n + 1, k.trim())));
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_arithmetic() {
        let cfg = ModelConfig::desk();
        assert_eq!(cfg.tokens_per_window(), 288);
        assert_eq!(cfg.windows_for(256, 256).unwrap(), 1);
        assert_eq!(cfg.windows_for(256, 512).unwrap(), 2);
        assert_eq!(cfg.latent_tokens_for(256, 256).unwrap(), 32);
        assert_eq!(cfg.latent_tokens_for(512, 512).unwrap(), 128);
        assert!(cfg.windows_for(250, 256).is_err());
    }

    #[test]
    fn kv_roundtrip_and_errors() {
        let cfg = ModelConfig::tiny();
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert_eq!(ModelConfig::from_kv("preset=paper\n").unwrap(), ModelConfig::paper());
        assert!(ModelConfig::from_kv("dim=abc").is_err());
        assert!(ModelConfig::from_kv("bogus=1").is_err());
        assert!(ModelConfig::from_kv("dim=10\nheads=4").is_err());
    }
}
