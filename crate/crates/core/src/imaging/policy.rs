use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::{color_jitter, crop_with_offsets, flip_horizontal, rotate, CropOffsets, Image, ImagingError, Result};

/// Parameter ranges for stochastic augmentation. All intervals are closed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationPolicy {
    pub crop_offset_range: (i32, i32),
    pub flip_probability: f64,
    pub rotation_range: (f32, f32),
    pub hue_range: (f32, f32),
    pub saturation_scale_range: (f32, f32),
    pub value_scale_range: (f32, f32),
}

impl AugmentationPolicy {
    pub const WEAK: AugmentationPolicy = AugmentationPolicy {
        crop_offset_range: (-5, 5),
        flip_probability: 0.5,
        rotation_range: (0.0, 0.0),
        hue_range: (-0.05, 0.05),
        saturation_scale_range: (0.67, 1.5),
        value_scale_range: (0.67, 1.5),
    };

    pub const MODERATE: AugmentationPolicy = AugmentationPolicy {
        crop_offset_range: (-10, 10),
        flip_probability: 0.5,
        rotation_range: (-5.0, 5.0),
        hue_range: (-0.1, 0.1),
        saturation_scale_range: (0.5, 2.0),
        value_scale_range: (0.5, 2.0),
    };

    pub const STRONG: AugmentationPolicy = AugmentationPolicy {
        crop_offset_range: (-15, 15),
        flip_probability: 0.5,
        rotation_range: (-10.0, 10.0),
        hue_range: (-0.15, 0.15),
        saturation_scale_range: (0.4, 2.5),
        value_scale_range: (0.4, 2.5),
    };

    /// Random horizontal flip and nothing else.
    pub const FLIP_ONLY: AugmentationPolicy = AugmentationPolicy {
        crop_offset_range: (0, 0),
        flip_probability: 0.5,
        rotation_range: (0.0, 0.0),
        hue_range: (0.0, 0.0),
        saturation_scale_range: (1.0, 1.0),
        value_scale_range: (1.0, 1.0),
    };

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ImagingError::InvalidPolicy(msg));
        if self.crop_offset_range.0 > self.crop_offset_range.1 {
            return bad(format!("crop range {:?} is not ordered", self.crop_offset_range));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return bad(format!("flip probability {} outside [0, 1]", self.flip_probability));
        }
        for (name, (lo, hi)) in [("rotation", self.rotation_range), ("hue", self.hue_range)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("{name} range ({lo}, {hi}) is not an ordered finite interval"));
            }
        }
        for (name, (lo, hi)) in
            [("saturation", self.saturation_scale_range), ("value", self.value_scale_range)]
        {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                return bad(format!("{name} scale range ({lo}, {hi}) must be positive and ordered"));
            }
        }
        Ok(())
    }

    /// True when every field of `self` lies inside the matching field of `other`.
    pub fn contained_in(&self, other: &AugmentationPolicy) -> bool {
        let inside = |a: (f32, f32), b: (f32, f32)| b.0 <= a.0 && a.1 <= b.1;
        other.crop_offset_range.0 <= self.crop_offset_range.0
            && self.crop_offset_range.1 <= other.crop_offset_range.1
            && self.flip_probability <= other.flip_probability
            && inside(self.rotation_range, other.rotation_range)
            && inside(self.hue_range, other.hue_range)
            && inside(self.saturation_scale_range, other.saturation_scale_range)
            && inside(self.value_scale_range, other.value_scale_range)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyPreset {
    Weak,
    Moderate,
    Strong,
}

impl PolicyPreset {
    pub fn policy(self) -> AugmentationPolicy {
        match self {
            PolicyPreset::Weak => AugmentationPolicy::WEAK,
            PolicyPreset::Moderate => AugmentationPolicy::MODERATE,
            PolicyPreset::Strong => AugmentationPolicy::STRONG,
        }
    }
}

impl FromStr for PolicyPreset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "weak" => Ok(PolicyPreset::Weak),
            "moderate" => Ok(PolicyPreset::Moderate),
            "strong" => Ok(PolicyPreset::Strong),
            other => Err(format!("unknown policy '{other}' (expected weak, moderate or strong)")),
        }
    }
}

impl fmt::Display for PolicyPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyPreset::Weak => "weak",
            PolicyPreset::Moderate => "moderate",
            PolicyPreset::Strong => "strong",
        })
    }
}

/// One concrete draw from an [`AugmentationPolicy`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationParams {
    pub offsets: CropOffsets,
    pub flip: bool,
    pub degrees: f32,
    pub hue_shift: f32,
    pub sat_scale: f32,
    pub val_scale: f32,
}

impl AugmentationParams {
    pub const IDENTITY: AugmentationParams = AugmentationParams {
        offsets: CropOffsets { top: 0, bottom: 0, left: 0, right: 0 },
        flip: false,
        degrees: 0.0,
        hue_shift: 0.0,
        sat_scale: 1.0,
        val_scale: 1.0,
    };

    pub fn flip_only(flip: bool) -> Self {
        AugmentationParams { flip, ..Self::IDENTITY }
    }

    /// True when nothing but (possibly) a horizontal flip is applied.
    pub fn is_flip_only(&self) -> bool {
        AugmentationParams { flip: false, ..*self } == Self::IDENTITY
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f32, f32)) -> f32 {
    let u: f64 = rng.gen();
    if lo == hi {
        return lo;
    }
    (lo as f64 + (hi as f64 - lo as f64) * u).clamp(lo as f64, hi as f64) as f32
}

fn log_uniform(rng: &mut impl Rng, (lo, hi): (f32, f32)) -> f32 {
    let u: f64 = rng.gen();
    if lo == hi {
        return lo;
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    (a + (b - a) * u).exp().clamp(lo as f64, hi as f64) as f32
}

/// Draws augmentation parameters. The number and order of draws from `rng`
/// is fixed regardless of the policy, so streams stay aligned across presets.
pub fn sample_augmentation(policy: &AugmentationPolicy, rng: &mut impl Rng) -> AugmentationParams {
    let (lo, hi) = policy.crop_offset_range;
    let mut offset = || rng.gen_range(lo..=hi);
    let offsets = CropOffsets { top: offset(), bottom: offset(), left: offset(), right: offset() };
    let flip = rng.gen::<f64>() < policy.flip_probability;
    AugmentationParams {
        offsets,
        flip,
        degrees: uniform(rng, policy.rotation_range),
        hue_shift: uniform(rng, policy.hue_range),
        sat_scale: log_uniform(rng, policy.saturation_scale_range),
        val_scale: log_uniform(rng, policy.value_scale_range),
    }
}

/// Crop, then flip, then rotate, then color jitter. Identity steps are skipped.
pub fn apply_augmentation(image: &Image, params: &AugmentationParams) -> Result<Image> {
    let mut out = crop_with_offsets(image, params.offsets)?;
    if params.flip {
        out = flip_horizontal(&out);
    }
    if params.degrees != 0.0 {
        out = rotate(&out, params.degrees);
    }
    if params.hue_shift != 0.0 || params.sat_scale != 1.0 || params.val_scale != 1.0 {
        out = color_jitter(&out, params.hue_shift, params.sat_scale, params.val_scale);
    }
    Ok(out)
}
