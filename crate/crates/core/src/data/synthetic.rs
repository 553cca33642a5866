//! Synthetic multi-domain pedestrian-like identities.
//!
//! Each identity has persistent clothing colors and body proportions; each
//! domain plays the role of a camera network with its own tint, brightness,
//! background and sensor noise. Identity is recoverable across domains, but
//! every domain looks different.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, Result};
use crate::imaging::{write_ppm, Image};
use crate::rng::{stream, tag};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub domains: usize,
    pub identities_per_domain: usize,
    pub images_per_identity: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Index of the first generated domain. Domains with distinct indices
    /// get distinct styles and identities, which is how held-out target
    /// domains are produced from the same seed.
    pub first_domain: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            domains: 3,
            identities_per_domain: 50,
            images_per_identity: 10,
            height: 64,
            width: 32,
            seed: 0,
            first_domain: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("domains", self.domains),
            ("identities_per_domain", self.identities_per_domain),
            ("images_per_identity", self.images_per_identity),
            ("height", self.height),
            ("width", self.width),
        ];
        match counts.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(DataError::InvalidSpec(format!("{name} must be at least 1"))),
            None => Ok(()),
        }
    }
}

/// `key=value` lines; `#` starts a comment. Unknown keys are rejected.
impl FromStr for SyntheticSpec {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        for (lineno, raw) in s.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| DataError::InvalidSpec(format!("line {}: {msg}", lineno + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = || value.parse::<u64>().map_err(|_| bad(format!("{key}: not a non-negative integer: {value:?}")));
            match key {
                "domains" => spec.domains = num()? as usize,
                "identities_per_domain" => spec.identities_per_domain = num()? as usize,
                "images_per_identity" => spec.images_per_identity = num()? as usize,
                "height" => spec.height = num()? as usize,
                "width" => spec.width = num()? as usize,
                "seed" => spec.seed = num()?,
                "first_domain" => spec.first_domain = num()? as usize,
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

struct DomainStyle {
    background: [f32; 3],
    gradient: f32,
    tint: [f32; 3],
    brightness: f32,
    noise: f32,
}

struct IdentityLook {
    torso: [f32; 3],
    legs: [f32; 3],
    skin: [f32; 3],
    hair: [f32; 3],
    stripe: Option<[f32; 3]>,
    bag: Option<(f32, [f32; 3])>,
    torso_frac: f32,
    body_width: f32,
    leg_width: f32,
}

fn rgb(rng: &mut impl Rng, lo: f32, hi: f32) -> [f32; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

fn domain_style(seed: u64, domain: usize) -> DomainStyle {
    let mut rng = stream(seed, &[tag::SYNTH_DOMAIN, domain as u64]);
    DomainStyle {
        background: rgb(&mut rng, 0.25, 0.75),
        gradient: rng.gen_range(-0.15..0.15),
        tint: rgb(&mut rng, 0.7, 1.3),
        brightness: rng.gen_range(0.75..1.2),
        noise: rng.gen_range(0.01..0.05),
    }
}

fn identity_look(seed: u64, domain: usize, id: usize) -> IdentityLook {
    let mut rng = stream(seed, &[tag::SYNTH_IDENTITY, domain as u64, id as u64]);
    let skin_r = rng.gen_range(0.45..0.9);
    let torso = rgb(&mut rng, 0.05, 0.95);
    let legs = rgb(&mut rng, 0.05, 0.8);
    let hair = rgb(&mut rng, 0.02, 0.4);
    let stripe = rng.gen_bool(0.5).then(|| rgb(&mut rng, 0.05, 0.95));
    let bag = rng.gen_bool(0.4).then(|| (if rng.gen_bool(0.5) { -1.0 } else { 1.0 }, rgb(&mut rng, 0.05, 0.9)));
    IdentityLook {
        torso,
        legs,
        skin: [skin_r, skin_r * 0.8, skin_r * 0.65],
        hair,
        stripe,
        bag,
        torso_frac: rng.gen_range(0.28..0.40),
        body_width: rng.gen_range(0.40..0.65),
        leg_width: rng.gen_range(0.65..0.95),
    }
}

fn render(spec: &SyntheticSpec, style: &DomainStyle, look: &IdentityLook, rng: &mut impl Rng) -> Image {
    let (h, w) = (spec.height as f32, spec.width as f32);
    let shift_x = rng.gen_range(-0.08..0.08) * w;
    let shift_y = rng.gen_range(-0.04..0.04) * h;
    let scale = rng.gen_range(0.9..1.05);
    let gain = rng.gen_range(0.9..1.1);
    let bg_jitter = rgb(rng, -0.05, 0.05);
    let noise = Normal::new(0.0f32, style.noise).expect("noise level is positive");

    let cx = w / 2.0 + shift_x;
    let top = 0.04 * h + shift_y;
    let body_h = 0.92 * h * scale;
    let head_r = 0.065 * body_h;
    let head_cy = top + head_r;
    let torso_top = top + 2.0 * head_r + 0.01 * body_h;
    let torso_bot = torso_top + look.torso_frac * body_h;
    let legs_bot = top + body_h;
    let half_body = look.body_width * w * scale / 2.0;
    let half_leg = half_body * look.leg_width;
    let gap = 0.05 * w;
    let stripe_top = torso_top + 0.45 * (torso_bot - torso_top);
    let stripe_bot = stripe_top + 0.18 * (torso_bot - torso_top);

    let mut img = Image::zeros(spec.height, spec.width).expect("spec dimensions validated");
    for y in 0..spec.height {
        let fy = y as f32 + 0.5;
        for x in 0..spec.width {
            let fx = x as f32 + 0.5;
            let dx = fx - cx;
            let shade = 1.0 + style.gradient * (fy / h - 0.5);
            let mut color = [0.0; 3];
            for c in 0..3 {
                color[c] = (style.background[c] + bg_jitter[c]) * shade;
            }
            if fy >= torso_bot && fy < legs_bot && dx.abs() < half_leg && dx.abs() > gap / 2.0 {
                color = look.legs;
            }
            if fy >= torso_top && fy < torso_bot && dx.abs() < half_body {
                color = match look.stripe {
                    Some(s) if fy >= stripe_top && fy < stripe_bot => s,
                    _ => look.torso,
                };
            }
            if let Some((side, bag)) = look.bag {
                let bx = dx * side;
                if bx > half_body * 0.85 && bx < half_body * 0.85 + 0.14 * w && fy > torso_top + 0.3 * (torso_bot - torso_top) && fy < torso_bot + 0.1 * body_h {
                    color = bag;
                }
            }
            let hy = fy - head_cy;
            if dx * dx + hy * hy < head_r * head_r {
                color = if hy < -0.35 * head_r { look.hair } else { look.skin };
            }
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                px[c] = color[c] * gain * style.tint[c] * style.brightness + noise.sample(rng);
            }
            img.set_pixel(y, x, px);
        }
    }
    img
}

/// Writes `out/<domainNN>/<idNNNN>/<NNN>.ppm` plus a manifest listing each
/// domain's name, identity count and image count.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    spec.validate()?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    fs::create_dir_all(out).map_err(io(out))?;
    let mut manifest = String::new();
    for d in 0..spec.domains {
        let domain = spec.first_domain + d;
        let name = format!("domain{domain:02}");
        let style = domain_style(spec.seed, domain);
        for id in 0..spec.identities_per_domain {
            let look = identity_look(spec.seed, domain, id);
            let dir = out.join(&name).join(format!("id{id:04}"));
            fs::create_dir_all(&dir).map_err(io(&dir))?;
            for k in 0..spec.images_per_identity {
                let mut rng = stream(spec.seed, &[tag::SYNTH_IMAGE, domain as u64, id as u64, k as u64]);
                let img = render(spec, &style, &look, &mut rng);
                write_ppm(&dir.join(format!("{k:03}.ppm")), &img)?;
            }
        }
        let _ = writeln!(
            manifest,
            "{name} {} {}",
            spec.identities_per_domain,
            spec.identities_per_domain * spec.images_per_identity
        );
    }
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(io(&path))?;
    Ok(())
}
