//! Stand-in for private endoscopy footage: a drifting low-frequency tissue
//! texture with a bright instrument that enters from the bottom edge for
//! contiguous runs of frames.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FrameDataset, FrameRecord, CHANNELS, FRAME_LEN, FRAME_SIZE};
use crate::error::{Error, Result};
use crate::rng::{stage_rng, StageRng};

const BACKGROUND_CAP: f64 = 0.7;
const TOOL_FLOOR: f64 = 0.85;
const WAVES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub frames: usize,
    /// Fraction of frames showing the tool.
    pub prevalence: f64,
    /// Camera advance per frame, in texture phase radians.
    pub drift_speed: f64,
    /// Peak-to-peak swing of the tissue shading around its mean of 0.775;
    /// at most 0.45 so the shading stays within [0.55, 1].
    pub texture_contrast: f64,
    /// Average length of one tool-present plus tool-absent cycle, in frames.
    pub mean_cycle: f64,
    /// Instrument shaft width range in pixels.
    pub tool_width: [f64; 2],
    /// How far the tip reaches into the frame, in pixels.
    pub tool_reach: [f64; 2],
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            frames: 1551,
            prevalence: 0.658,
            drift_speed: 0.004,
            texture_contrast: 0.45,
            mean_cycle: 250.0,
            tool_width: [12.0, 14.0],
            tool_reach: [38.0, 46.0],
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::invalid("synthetic frame count must be positive"));
        }
        if !(0.0..=1.0).contains(&self.prevalence) {
            return Err(Error::invalid(format!(
                "prevalence must lie in [0, 1], got {}",
                self.prevalence
            )));
        }
        if !(self.drift_speed.is_finite() && self.drift_speed >= 0.0) {
            return Err(Error::invalid("drift speed must be finite and non-negative"));
        }
        if !(0.0..=0.45).contains(&self.texture_contrast) {
            return Err(Error::invalid("texture contrast must lie in [0, 0.45]"));
        }
        if !(self.mean_cycle >= 1.0) {
            return Err(Error::invalid("mean cycle must be at least one frame"));
        }
        for (name, [lo, hi]) in [("tool_width", self.tool_width), ("tool_reach", self.tool_reach)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::invalid(format!("{name} must be an increasing positive range")));
            }
        }
        Ok(())
    }
}

struct Wave {
    fx: f64,
    fy: f64,
    amp: f64,
    speed: f64,
    phase: f64,
}

struct ToolPose {
    entry: (f64, f64),
    dir: (f64, f64),
    width: f64,
    reach: f64,
    swing: f64,
    omega: f64,
    phase: f64,
    start: usize,
}

/// Positive composition of `total` into `parts` pieces.
fn compose(total: usize, parts: usize, rng: &mut StageRng) -> Vec<usize> {
    debug_assert!(parts >= 1 && total >= parts);
    let mut cuts: Vec<usize> = sample(rng, total - 1, parts - 1).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    cuts.push(total);
    let mut prev = 0;
    cuts.into_iter()
        .map(|c| {
            let d = c - prev;
            prev = c;
            d
        })
        .collect()
}

/// Per-frame span id for tool-present frames; exactly `round(p * n)` of them.
fn tool_schedule(n: usize, prevalence: f64, mean_cycle: f64, rng: &mut StageRng) -> Vec<Option<usize>> {
    let tool = ((prevalence * n as f64).round() as usize).min(n);
    if tool == 0 {
        return vec![None; n];
    }
    let absent = n - tool;
    let spans = ((n as f64 / mean_cycle).round() as usize).clamp(1, tool).min(absent + 1);
    let on = compose(tool, spans, rng);
    // gaps before, between and after spans; interior gaps need at least one frame
    let spare = absent + 1 - spans;
    let gaps: Vec<usize> = compose(spare + spans + 1, spans + 1, rng)
        .into_iter()
        .enumerate()
        .map(|(i, g)| g - 1 + usize::from(i > 0 && i < spans))
        .collect();
    let mut out = Vec::with_capacity(n);
    for (s, &len) in on.iter().enumerate() {
        out.extend(std::iter::repeat_n(None, gaps[s]));
        out.extend(std::iter::repeat_n(Some(s), len));
    }
    out.extend(std::iter::repeat_n(None, gaps[spans]));
    debug_assert_eq!(out.len(), n);
    out
}

fn tool_pose(cfg: &SyntheticConfig, start: usize, rng: &mut StageRng) -> ToolPose {
    let s = FRAME_SIZE as f64;
    let along = rng.random_range(0.47..0.53) * s;
    // instruments come up through the bottom edge, pointing inward
    let (entry, normal) = ((along, s + 3.0), (0.0, -1.0));
    let tilt: f64 = rng.random_range(-0.08..0.08);
    let (c, sn) = (tilt.cos(), tilt.sin());
    let dir = (normal.0 * c - normal.1 * sn, normal.0 * sn + normal.1 * c);
    ToolPose {
        entry,
        dir,
        width: rng.random_range(cfg.tool_width[0]..=cfg.tool_width[1]),
        reach: rng.random_range(cfg.tool_reach[0]..=cfg.tool_reach[1]),
        swing: rng.random_range(0.05..0.15),
        omega: rng.random_range(0.05..0.2),
        phase: rng.random_range(0.0..2.0 * PI),
        start,
    }
}

/// Generates a labelled synthetic sequence. Identical configs give
/// pixel-identical datasets.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<FrameDataset> {
    cfg.validate()?;
    let mut rng = stage_rng(cfg.seed, "synthetic", 0);
    let schedule = tool_schedule(cfg.frames, cfg.prevalence, cfg.mean_cycle, &mut rng);

    let waves: Vec<Wave> = (0..WAVES)
        .map(|_| Wave {
            fx: rng.random_range(-2.5..2.5) * 2.0 * PI / FRAME_SIZE as f64,
            fy: rng.random_range(-2.5..2.5) * 2.0 * PI / FRAME_SIZE as f64,
            amp: rng.random_range(0.5..1.0),
            speed: rng.random_range(0.5..1.5),
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect();
    let amp_total: f64 = waves.iter().map(|w| w.amp).sum();

    let mut poses: Vec<ToolPose> = Vec::new();
    let mut camera = 0.0f64;
    let mut frames = Vec::with_capacity(cfg.frames);
    let plane = FRAME_SIZE * FRAME_SIZE;
    for t in 0..cfg.frames {
        // camera speed wanders smoothly around the configured drift
        camera += cfg.drift_speed * (1.0 + 0.5 * (t as f64 * 0.013).sin());
        let hue = 0.5 + 0.5 * (camera * 0.05).sin();
        let tint = [0.62 + 0.08 * hue, 0.30 + 0.10 * (1.0 - hue), 0.26 + 0.06 * hue];

        let mut pixels = vec![0.0f32; FRAME_LEN];
        let c0 = (FRAME_SIZE as f64 - 1.0) / 2.0;
        for y in 0..FRAME_SIZE {
            for x in 0..FRAME_SIZE {
                let (xf, yf) = (x as f64, y as f64);
                let tex: f64 = waves
                    .iter()
                    .map(|w| w.amp * (w.fx * xf + w.fy * yf + w.phase + w.speed * camera).sin())
                    .sum::<f64>()
                    / amp_total;
                let r2 = ((xf - c0).powi(2) + (yf - c0).powi(2)) / (c0 * c0 * 2.0);
                let shade = (0.775 + 0.5 * cfg.texture_contrast * tex) * (1.0 - 0.35 * r2);
                for c in 0..CHANNELS {
                    let v = (tint[c] * shade / 0.72).clamp(0.0, BACKGROUND_CAP);
                    pixels[c * plane + y * FRAME_SIZE + x] = v as f32;
                }
            }
        }

        if let Some(span) = schedule[t] {
            if poses.len() <= span {
                poses.push(tool_pose(cfg, t, &mut rng));
            }
            draw_tool(&mut pixels, &poses[span], t);
        }

        frames.push(FrameRecord {
            index: t,
            filename: format!("frame_{t:04}.png"),
            pixels,
            label: Some(schedule[t].is_some()),
        });
    }
    FrameDataset::new(frames)
}

/// Capsule-shaped shaft from the entry point to a tip that slides in and
/// out; brightest along the axis like a specular metal highlight.
fn draw_tool(pixels: &mut [f32], pose: &ToolPose, t: usize) {
    let dt = (t - pose.start) as f64;
    let depth = pose.reach * (1.0 - pose.swing * (0.5 + 0.5 * (pose.omega * dt + pose.phase).sin()));
    let (ex, ey) = pose.entry;
    let (dx, dy) = pose.dir;
    let (tx, ty) = (ex + dx * depth, ey + dy * depth);
    let radius = pose.width / 2.0;
    let plane = FRAME_SIZE * FRAME_SIZE;
    for y in 0..FRAME_SIZE {
        for x in 0..FRAME_SIZE {
            let (px, py) = (x as f64, y as f64);
            // distance to the segment entry->tip
            let proj = ((px - ex) * dx + (py - ey) * dy).clamp(0.0, depth);
            let (cx, cy) = (ex + dx * proj, ey + dy * proj);
            let dist = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            if dist > radius {
                continue;
            }
            let rel = dist / radius;
            let v = TOOL_FLOOR + 0.1 * (1.0 - rel * rel) + 0.03 * (1.0 - ((px - tx).abs() + (py - ty).abs()) / 96.0).max(0.0);
            let v = v.min(1.0);
            let i = y * FRAME_SIZE + x;
            pixels[i] = v as f32;
            pixels[plane + i] = v as f32;
            pixels[2 * plane + i] = (v + 0.02).min(1.0) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(frames: usize, prevalence: f64) -> SyntheticConfig {
        SyntheticConfig {
            frames,
            prevalence,
            seed: 11,
            ..Default::default()
        }
    }

    fn tool_count(d: &FrameDataset) -> usize {
        d.frames().iter().filter(|f| f.label == Some(true)).count()
    }

    #[test]
    fn hundred_frames_at_default_prevalence() {
        let d = generate_synthetic(&cfg(100, 0.658)).unwrap();
        assert_eq!(d.len(), 100);
        let n = tool_count(&d);
        assert!((64..=68).contains(&n), "{n}");
    }

    #[test]
    fn zero_prevalence_has_no_tool() {
        let d = generate_synthetic(&cfg(60, 0.0)).unwrap();
        assert_eq!(tool_count(&d), 0);
        assert!(d
            .frames()
            .iter()
            .all(|f| f.pixels.iter().all(|&p| f64::from(p) <= BACKGROUND_CAP + 1e-6)));
    }

    #[test]
    fn invalid_prevalence_rejected() {
        assert!(generate_synthetic(&cfg(10, 1.2)).is_err());
        assert!(generate_synthetic(&cfg(10, -0.1)).is_err());
        assert!(generate_synthetic(&cfg(10, f64::NAN)).is_err());
    }

    #[test]
    fn texture_contrast_bounds() {
        for (c, ok) in [(0.0, true), (0.45, true), (0.5, false), (-0.1, false)] {
            let config = SyntheticConfig {
                texture_contrast: c,
                ..cfg(10, 0.5)
            };
            assert_eq!(generate_synthetic(&config).is_ok(), ok, "{c}");
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_synthetic(&cfg(30, 0.5)).unwrap();
        let b = generate_synthetic(&cfg(30, 0.5)).unwrap();
        assert_eq!(a, b);
        let mut other = cfg(30, 0.5);
        other.seed = 12;
        assert_ne!(a, generate_synthetic(&other).unwrap());
    }

    #[test]
    fn tool_frames_contain_bright_pixels_only_where_labelled() {
        let d = generate_synthetic(&cfg(200, 0.658)).unwrap();
        for f in d.frames() {
            let bright = f.pixels.iter().filter(|&&p| f64::from(p) >= TOOL_FLOOR - 1e-6).count();
            if f.label == Some(true) {
                assert!(bright > 30, "frame {} has {bright} tool pixels", f.index);
            } else {
                assert_eq!(bright, 0);
            }
        }
    }

    #[test]
    fn labels_come_in_runs() {
        let d = generate_synthetic(&cfg(1551, 0.658)).unwrap();
        let labels: Vec<bool> = d.frames().iter().map(|f| f.label.unwrap()).collect();
        let switches = labels.windows(2).filter(|w| w[0] != w[1]).count();
        assert!(switches < 200, "{switches}");
        let prevalence = tool_count(&d) as f64 / 1551.0;
        assert!((prevalence - 0.658).abs() <= 0.02);
    }
}
