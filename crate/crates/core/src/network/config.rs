use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::BlockKind;
use crate::error::{Error, Result};
use crate::tensor::split_index;

/// Where the lightweight residual groups sit among the `G` groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HybridMode {
    Front,
    End,
    Mixed,
}

/// Which stages beyond the residual blocks also use channel-split
/// convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementLocation {
    FeatureExtractionOnly,
    /// Upsampler convolutions read only the first `round(alpha * F)`
    /// feature maps.
    FePlusUpsampling,
    /// Additionally every group tail, the feature-extraction tail and the
    /// output convolution.
    Throughout,
}

fn normalize(s: &str) -> String {
    s.chars()
        .filter(|c| !matches!(c, '_' | '-' | ' '))
        .flat_map(char::to_lowercase)
        .collect()
}

macro_rules! named_enum {
    ($ty:ident, $what:literal, $( $variant:ident => $name:literal ),+ $(,)?) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($ty::$variant => $name),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let n = normalize(s);
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| normalize(v.name()) == n || normalize(&format!("{v:?}")) == n)
                    .ok_or_else(|| Error::UnknownName {
                        kind: $what,
                        name: s.to_string(),
                    })
            }
        }
    };
}

named_enum!(HybridMode, "hybrid mode", Front => "front", End => "end", Mixed => "mixed");
named_enum!(
    ReplacementLocation,
    "replacement location",
    FeatureExtractionOnly => "feature_extraction_only",
    FePlusUpsampling => "fe_plus_upsampling",
    Throughout => "throughout",
);

/// Published reference configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    AccuracyFocused,
    LatencyFocused,
}

named_enum!(Preset, "preset", AccuracyFocused => "accuracy", LatencyFocused => "latency");

impl Preset {
    pub fn config(self) -> NetworkConfig {
        match self {
            Preset::AccuracyFocused => NetworkConfig::accuracy(),
            Preset::LatencyFocused => NetworkConfig::latency(),
        }
    }
}

fn default_beta() -> f64 {
    1.0
}

/// Everything needed to build a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// 2 or 4; each factor of two is one convolution plus pixel-shuffle
    /// stage.
    pub scale: usize,
    pub feature_maps: usize,
    pub groups: usize,
    pub blocks_per_group: usize,
    pub alpha: f64,
    /// Number of residual groups built from `block_kind` blocks; the rest
    /// use standard residual blocks.
    pub hybrid_index: usize,
    pub hybrid_mode: HybridMode,
    pub replacement_location: ReplacementLocation,
    pub block_kind: BlockKind,
    /// Idle-block expansion ratio.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Subtract a per-channel RGB mean on input and add it back on output.
    #[serde(default)]
    pub mean_shift: bool,
}

/// RGB means of the DIV2K training set in the `[0, 255]` range.
pub const RGB_MEAN: [f64; 3] = [0.4488 * 255.0, 0.4371 * 255.0, 0.4040 * 255.0];

const KEYS: [&str; 11] = [
    "scale",
    "feature_maps",
    "groups",
    "blocks_per_group",
    "alpha",
    "hybrid_index",
    "hybrid_mode",
    "replacement_location",
    "block_kind",
    "beta",
    "mean_shift",
];

impl NetworkConfig {
    /// 5 groups of 6 blocks, the first 3 groups split with `alpha = 0.25`.
    pub fn latency() -> Self {
        NetworkConfig {
            scale: 4,
            feature_maps: 16,
            groups: 5,
            blocks_per_group: 6,
            alpha: 0.25,
            hybrid_index: 3,
            hybrid_mode: HybridMode::Front,
            replacement_location: ReplacementLocation::FeatureExtractionOnly,
            block_kind: BlockKind::SplitSr,
            beta: 1.0,
            mean_shift: false,
        }
    }

    /// 7 groups of 7 blocks, the first 3 groups split with `alpha = 0.25`.
    pub fn accuracy() -> Self {
        NetworkConfig {
            groups: 7,
            blocks_per_group: 7,
            ..Self::latency()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !matches!(self.scale, 2 | 4) {
            return bad(format!("scale must be 2 or 4, got {}", self.scale));
        }
        if self.feature_maps == 0 || self.groups == 0 || self.blocks_per_group == 0 {
            return bad("feature_maps, groups and blocks_per_group must be positive".into());
        }
        if self.hybrid_index > self.groups {
            return bad(format!(
                "hybrid_index {} exceeds groups {}",
                self.hybrid_index, self.groups
            ));
        }
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 1, got {}", self.beta));
        }
        if self.hybrid_index > 0 {
            split_index(self.alpha, self.feature_maps).map_err(|e| Error::Config(e.to_string()))?;
            if self.replacement_location != ReplacementLocation::FeatureExtractionOnly
                && self.block_kind != BlockKind::SplitSr
            {
                return bad(format!(
                    "replacement_location {} needs block_kind split_sr, got {}",
                    self.replacement_location, self.block_kind
                ));
            }
        }
        Ok(())
    }

    /// Input width of the upsampler convolutions.
    pub(crate) fn upsampler_input(&self) -> usize {
        match self.replacement_location {
            ReplacementLocation::FePlusUpsampling | ReplacementLocation::Throughout
                if self.hybrid_index > 0 =>
            {
                self.active_width()
            }
            _ => self.feature_maps,
        }
    }

    /// Input width of the group tails, feature-extraction tail and output
    /// convolution.
    pub(crate) fn tail_input(&self) -> usize {
        match self.replacement_location {
            ReplacementLocation::Throughout if self.hybrid_index > 0 => self.active_width(),
            _ => self.feature_maps,
        }
    }

    fn active_width(&self) -> usize {
        split_index(self.alpha, self.feature_maps).expect("validated config")
    }

    /// Parses `key = value` lines or a JSON object.
    ///
    /// In the line form `#` starts a comment, `,` and `;` also separate
    /// entries, and an optional `preset = latency|accuracy` supplies
    /// defaults for every other key.
    pub fn parse(text: &str) -> Result<Self> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(Error::Config("empty network config".into()));
        }
        if trimmed.starts_with('{') {
            let cfg: NetworkConfig =
                serde_json::from_str(trimmed).map_err(|e| Error::Config(e.to_string()))?;
            cfg.validate()?;
            return Ok(cfg);
        }

        let mut pairs: Vec<(String, String)> = Vec::new();
        for line in trimmed.lines() {
            let line = line.split('#').next().unwrap_or("");
            for entry in line.split([',', ';']) {
                let entry = entry.trim();
                if entry.is_empty() {
                    continue;
                }
                let (k, v) = entry
                    .split_once(['=', ':'])
                    .ok_or_else(|| Error::Config(format!("expected key = value, got `{entry}`")))?;
                pairs.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        if pairs.is_empty() {
            return Err(Error::Config("empty network config".into()));
        }

        let base = pairs
            .iter()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.parse::<Preset>())
            .transpose()?
            .map(Preset::config);
        let mut seen: Vec<&str> = Vec::new();
        let mut cfg = base.clone().unwrap_or_else(Self::latency);
        for (k, v) in &pairs {
            let num = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::Config(format!("`{k}` expects an integer, got `{v}`")))
            };
            let real = |v: &str| -> Result<f64> {
                v.parse()
                    .map_err(|_| Error::Config(format!("`{k}` expects a number, got `{v}`")))
            };
            match k.as_str() {
                "preset" => continue,
                "scale" => cfg.scale = num(v)?,
                "feature_maps" => cfg.feature_maps = num(v)?,
                "groups" => cfg.groups = num(v)?,
                "blocks_per_group" => cfg.blocks_per_group = num(v)?,
                "alpha" => cfg.alpha = real(v)?,
                "hybrid_index" => cfg.hybrid_index = num(v)?,
                "hybrid_mode" => cfg.hybrid_mode = v.parse()?,
                "replacement_location" => cfg.replacement_location = v.parse()?,
                "block_kind" => cfg.block_kind = v.parse()?,
                "beta" => cfg.beta = real(v)?,
                "mean_shift" => {
                    cfg.mean_shift = v
                        .parse()
                        .map_err(|_| Error::Config(format!("`mean_shift` expects true or false, got `{v}`")))?
                }
                other => {
                    return Err(Error::UnknownName {
                        kind: "config key",
                        name: other.to_string(),
                    })
                }
            }
            seen.push(KEYS.iter().find(|key| **key == k.as_str()).expect("matched above"));
        }
        if base.is_none() {
            let missing: Vec<&str> = KEYS[..9].iter().copied().filter(|key| !seen.contains(key)).collect();
            if !missing.is_empty() {
                return Err(Error::Config(format!("missing keys: {}", missing.join(", "))));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The `key = value` form accepted by [`NetworkConfig::parse`].
    pub fn to_text(&self) -> String {
        format!(
            "scale = {}\nfeature_maps = {}\ngroups = {}\nblocks_per_group = {}\nalpha = {}\n\
             hybrid_index = {}\nhybrid_mode = {}\nreplacement_location = {}\nblock_kind = {}\n\
             beta = {}\nmean_shift = {}\n",
            self.scale,
            self.feature_maps,
            self.groups,
            self.blocks_per_group,
            self.alpha,
            self.hybrid_index,
            self.hybrid_mode,
            self.replacement_location,
            self.block_kind,
            self.beta,
            self.mean_shift
        )
    }
}

impl FromStr for NetworkConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

/// Whether a residual group uses standard or lightweight blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupRole {
    Standard,
    Lightweight,
}

/// Assigns a role to each of the `G` residual groups.
///
/// `Mixed` spreads the lightweight groups evenly from the first group to
/// the last: group `round(i * (G - 1) / (HI - 1))` for `i < HI`, moving a
/// collision to the next free group.
pub fn plan_groups(config: &NetworkConfig) -> Result<Vec<GroupRole>> {
    let (g, hi) = (config.groups, config.hybrid_index);
    if hi > g {
        return Err(Error::Config(format!("hybrid_index {hi} exceeds groups {g}")));
    }
    let mut plan = vec![GroupRole::Standard; g];
    let lightweight: Vec<usize> = match config.hybrid_mode {
        HybridMode::Front => (0..hi).collect(),
        HybridMode::End => (g - hi..g).collect(),
        HybridMode::Mixed => {
            let mut taken = vec![false; g];
            let mut out = Vec::with_capacity(hi);
            for i in 0..hi {
                let ideal = if hi == 1 {
                    0
                } else {
                    (i * (g - 1) * 2 + (hi - 1)) / (2 * (hi - 1))
                };
                let slot = (ideal..g)
                    .chain(0..ideal)
                    .find(|&s| !taken[s])
                    .expect("hi <= g leaves a free slot");
                taken[slot] = true;
                out.push(slot);
            }
            out
        }
    };
    for i in lightweight {
        plan[i] = GroupRole::Lightweight;
    }
    Ok(plan)
}
