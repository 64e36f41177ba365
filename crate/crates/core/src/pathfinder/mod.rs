//! Deterministic generator for the contour-tracing segmentation task: one
//! dashed target contour marked by a white dot, distractor contours as
//! clutter, and a binary mask labelling the target's ink.
//!
//! Geometry is a discrete random walk: each successive dash turns by a
//! uniform angle bounded by `curvature_jitter`. Rendering happens on the
//! integer pixel grid (Bresenham lines, integer disks), so a `(config,
//! seed)` pair is a pure function of its inputs.

pub mod dataset;

pub use dataset::{generate_dataset, load_dataset, Dataset, DatasetManifest, LoadedSample};

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum PathfinderError {
    #[error("infeasible config: {0}")]
    Infeasible(String),
    #[error("failed to place {what} after {attempts} attempts; lower the density (fewer dashes, fewer distractors, or a larger image)")]
    PlacementFailed { what: String, attempts: usize },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad dataset manifest {path}: {reason}")]
    BadManifest { path: String, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, PathfinderError>;

/// Full generator parameterization. All lengths are in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathfinderConfig {
    pub image_size: usize,
    pub target_dashes: usize,
    pub n_distractor_contours: usize,
    pub distractor_dashes: usize,
    pub dash_length_px: usize,
    pub gap_length_px: usize,
    pub thickness_px: usize,
    /// Maximum turn per dash, radians.
    pub curvature_jitter: f64,
    pub marker_radius_px: usize,
    pub min_separation_px: usize,
    /// Base seed; sample `i` of a dataset uses `seed + i`.
    pub seed: u64,
}

impl Default for PathfinderConfig {
    /// Desk-scale profile: 64 px images, 14-dash targets, two distractors.
    fn default() -> Self {
        PathfinderConfig {
            image_size: 64,
            target_dashes: 14,
            n_distractor_contours: 2,
            distractor_dashes: 14,
            dash_length_px: 4,
            gap_length_px: 2,
            thickness_px: 1,
            curvature_jitter: 0.4,
            marker_radius_px: 2,
            min_separation_px: 2,
            seed: 0,
        }
    }
}

impl PathfinderConfig {
    /// Paper-scale geometry at 160 px.
    pub fn paper_scale() -> Self {
        PathfinderConfig {
            image_size: 160,
            ..Default::default()
        }
    }

    fn margin(&self) -> usize {
        self.marker_radius_px + self.min_separation_px + self.thickness_px + 1
    }

    /// Worst-case (straight) contour length in pixels.
    fn contour_extent(&self, dashes: usize) -> f64 {
        (dashes * (self.dash_length_px + self.gap_length_px) - self.gap_length_px) as f64
    }

    /// Reject configurations whose contour cannot fit even along the
    /// diagonal of the drawable interior.
    pub fn validate(&self) -> Result<()> {
        if self.target_dashes < 3 {
            return Err(PathfinderError::Infeasible(format!(
                "target_dashes must be >= 3, got {}",
                self.target_dashes
            )));
        }
        if self.dash_length_px < 1 || self.thickness_px < 1 || self.image_size < 16 {
            return Err(PathfinderError::Infeasible(
                "dash_length_px and thickness_px must be >= 1, image_size >= 16".into(),
            ));
        }
        if self.distractor_dashes < 1 && self.n_distractor_contours > 0 {
            return Err(PathfinderError::Infeasible("distractor_dashes must be >= 1".into()));
        }
        let interior = self.image_size as f64 - 2.0 * self.margin() as f64;
        if interior < self.dash_length_px as f64 {
            return Err(PathfinderError::Infeasible(format!(
                "margins leave no drawable interior in a {} px image",
                self.image_size
            )));
        }
        // The steered walk folds, so the binding constraint is packing
        // capacity, not straight extent: folds must stay min_separation
        // apart, giving roughly interior^2 / fold_pitch of usable length.
        let fold_pitch = (2 * self.min_separation_px + 2) as f64;
        let capacity = 0.35 * interior * interior / fold_pitch;
        let needed = self
            .contour_extent(self.target_dashes)
            .max(self.contour_extent(self.distractor_dashes.max(1)));
        if needed > capacity {
            return Err(PathfinderError::Infeasible(format!(
                "a {needed:.0} px contour exceeds the ~{capacity:.0} px capacity of the {interior:.0} px interior"
            )));
        }
        Ok(())
    }
}

/// Generation record kept alongside each sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub dash_count: usize,
    pub distractor_count: usize,
    /// Dash endpoints of the target contour, pixel coordinates `(x, y)`.
    pub polyline: Vec<(i64, i64)>,
    /// Target ink pixels (mask population).
    pub target_ink_px: usize,
    /// Rendered pixel count per target dash, before overlap dedup.
    pub per_dash_px: Vec<usize>,
}

/// One generated image/mask pair with its provenance.
#[derive(Clone, Debug)]
pub struct PathfinderSample {
    /// Grayscale image in [0,1], shape `(1, S, S, 1)`.
    pub image: Tensor,
    /// Binary target mask, shape `(1, S, S, 1)`.
    pub mask: Tensor,
    pub meta: SampleMeta,
}

fn bresenham(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::new();
    loop {
        out.push((x0, y0));
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
    out
}

fn disk_offsets(radius: i64) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx * dx + dy * dy <= radius * radius {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Pixel-set occupancy on the image grid.
struct Grid {
    size: i64,
    cells: Vec<bool>,
}

impl Grid {
    fn new(size: usize) -> Grid {
        Grid {
            size: size as i64,
            cells: vec![false; size * size],
        }
    }

    #[inline]
    fn idx(&self, p: (i64, i64)) -> usize {
        (p.1 * self.size + p.0) as usize
    }

    fn contains(&self, p: (i64, i64)) -> bool {
        p.0 >= 0 && p.1 >= 0 && p.0 < self.size && p.1 < self.size && self.cells[self.idx(p)]
    }

    fn set(&mut self, p: (i64, i64)) {
        if p.0 >= 0 && p.1 >= 0 && p.0 < self.size && p.1 < self.size {
            let i = self.idx(p);
            self.cells[i] = true;
        }
    }

    fn dilate(&self, offsets: &[(i64, i64)]) -> Grid {
        let mut out = Grid::new(self.size as usize);
        for y in 0..self.size {
            for x in 0..self.size {
                if self.cells[(y * self.size + x) as usize] {
                    for &(dx, dy) in offsets {
                        out.set((x + dx, y + dy));
                    }
                }
            }
        }
        out
    }
}

struct Contour {
    /// Per-dash pixel lists (center line, before thickness dilation).
    dashes: Vec<Vec<(i64, i64)>>,
    vertices: Vec<(i64, i64)>,
}

const CONTOUR_ATTEMPTS: usize = 100;
const STEER_ATTEMPTS: usize = 24;

/// Random-walk contour confined to `[lo, hi)^2`, turning at most
/// `curvature_jitter` per dash, steered back toward the image center when a
/// dash would leave the bounds, the `avoid` zone, or its own earlier dashes.
/// Fails one attempt when a dash cannot be placed.
fn try_contour(
    cfg: &PathfinderConfig,
    rng: &mut ChaCha8Rng,
    dashes: usize,
    lo: f64,
    hi: f64,
    avoid: Option<&Grid>,
) -> Option<Contour> {
    let center = cfg.image_size as f64 / 2.0;
    let dash_len = cfg.dash_length_px as f64;
    let gap_len = cfg.gap_length_px as f64;
    let min_sep = cfg.min_separation_px.max(1) as i64;

    let mut pos = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
    if let Some(zone) = avoid {
        if zone.contains((pos.0.round() as i64, pos.1.round() as i64)) {
            return None;
        }
    }
    let mut theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut contour = Contour {
        dashes: Vec::with_capacity(dashes),
        vertices: vec![(pos.0.round() as i64, pos.1.round() as i64)],
    };
    // Which dash index covered each pixel, for the self-intersection probe.
    let mut covered: Vec<(i64, i64, usize)> = Vec::new();

    for d in 0..dashes {
        let mut placed = None;
        for retry in 0..STEER_ATTEMPTS {
            // First try a plain bounded turn; then alternate between turns
            // steered toward the image center and fresh random headings,
            // which lets the walk escape pockets the center steer cannot.
            let cand = match retry % 3 {
                0 => theta + rng.gen_range(-cfg.curvature_jitter..=cfg.curvature_jitter),
                1 => {
                    let to_center = (center - pos.1).atan2(center - pos.0);
                    to_center + rng.gen_range(-cfg.curvature_jitter..=cfg.curvature_jitter)
                }
                _ => rng.gen_range(0.0..std::f64::consts::TAU),
            };
            let reach = dash_len + gap_len;
            let end = (pos.0 + reach * cand.cos(), pos.1 + reach * cand.sin());
            if end.0 < lo || end.0 >= hi || end.1 < lo || end.1 >= hi {
                continue;
            }
            let dash_end = (pos.0 + dash_len * cand.cos(), pos.1 + dash_len * cand.sin());
            let p0 = (pos.0.round() as i64, pos.1.round() as i64);
            let p1 = (dash_end.0.round() as i64, dash_end.1.round() as i64);
            let pixels = bresenham(p0, p1);
            if let Some(zone) = avoid {
                if pixels.iter().any(|&p| zone.contains(p)) {
                    continue;
                }
            }
            // Reject contact with any dash other than the immediate
            // predecessor: the contour must stay a single traceable path.
            let collides = pixels.iter().any(|&(px, py)| {
                covered.iter().any(|&(ox, oy, od)| {
                    if d >= 1 && od + 1 >= d {
                        return false;
                    }
                    let (dx, dy) = (px - ox, py - oy);
                    dx * dx + dy * dy <= min_sep * min_sep
                })
            });
            if collides {
                continue;
            }
            placed = Some((cand, dash_end, p1, pixels));
            break;
        }
        let (cand, dash_end, p1, pixels) = placed?;
        theta = cand;
        for &(px, py) in &pixels {
            covered.push((px, py, d));
        }
        contour.dashes.push(pixels);
        contour.vertices.push(p1);
        pos = (dash_end.0 + gap_len * theta.cos(), dash_end.1 + gap_len * theta.sin());
    }
    Some(contour)
}

/// Deterministically generate one sample. The `seed` overrides the config's
/// base seed for this sample.
///
/// Placement is retried from deterministically derived sub-seeds when the
/// geometry dead-ends, so the result stays a pure function of
/// `(config, seed)`.
pub fn generate_sample(config: &PathfinderConfig, seed: u64) -> Result<PathfinderSample> {
    config.validate()?;
    const RESEEDS: u64 = 8;
    let mut last_err = None;
    for k in 0..RESEEDS {
        let stream_seed = seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        match try_generate(config, seed, stream_seed) {
            Ok(sample) => return Ok(sample),
            Err(e @ PathfinderError::PlacementFailed { .. }) => last_err = Some(e),
            Err(other) => return Err(other),
        }
    }
    Err(last_err.expect("at least one attempt ran"))
}

fn try_generate(config: &PathfinderConfig, seed: u64, stream_seed: u64) -> Result<PathfinderSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    let size = config.image_size;
    let margin = config.margin() as f64;
    let (lo, hi) = (margin, size as f64 - margin);
    let thick = disk_offsets(config.thickness_px as i64 - 1);

    // Target contour.
    let mut target = None;
    for _ in 0..CONTOUR_ATTEMPTS {
        if let Some(c) = try_contour(config, &mut rng, config.target_dashes, lo, hi, None) {
            target = Some(c);
            break;
        }
    }
    let target = target.ok_or(PathfinderError::PlacementFailed {
        what: "target contour".into(),
        attempts: CONTOUR_ATTEMPTS,
    })?;

    // Rasterize target ink at the configured thickness.
    let mut target_grid = Grid::new(size);
    let mut per_dash_px = Vec::with_capacity(target.dashes.len());
    let mut seen = HashSet::new();
    for dash in &target.dashes {
        let mut count = 0;
        for &(x, y) in dash {
            for &(dx, dy) in &thick {
                let p = (x + dx, y + dy);
                target_grid.set(p);
                if seen.insert(p) {
                    count += 1;
                }
            }
        }
        per_dash_px.push(count);
    }

    // Clearance zone distractor ink must stay out of; widened by the
    // distractor's own thickness so checking dash centerlines suffices.
    let sep_and_thick = disk_offsets((config.min_separation_px + config.thickness_px - 1) as i64);
    let forbidden = target_grid.dilate(&sep_and_thick);

    let mut distractor_grid = Grid::new(size);
    let dlo = (config.thickness_px + 1) as f64;
    let dhi = size as f64 - dlo;
    for i in 0..config.n_distractor_contours {
        let mut placed = false;
        for _ in 0..CONTOUR_ATTEMPTS {
            if let Some(c) = try_contour(config, &mut rng, config.distractor_dashes, dlo, dhi, Some(&forbidden)) {
                for dash in &c.dashes {
                    for &(x, y) in dash {
                        for &(dx, dy) in &thick {
                            distractor_grid.set((x + dx, y + dy));
                        }
                    }
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(PathfinderError::PlacementFailed {
                what: format!("distractor contour {}", i + 1),
                attempts: CONTOUR_ATTEMPTS,
            });
        }
    }

    // Marker disk at the contour start.
    let mut marker_grid = Grid::new(size);
    let start = target.vertices[0];
    for &(dx, dy) in &disk_offsets(config.marker_radius_px as i64) {
        marker_grid.set((start.0 + dx, start.1 + dy));
    }

    let mut image = vec![0.0f64; size * size];
    let mut mask = vec![0.0f64; size * size];
    for y in 0..size as i64 {
        for x in 0..size as i64 {
            let i = (y as usize) * size + x as usize;
            let on_target = target_grid.contains((x, y));
            let on_marker = marker_grid.contains((x, y));
            if on_target || on_marker || distractor_grid.contains((x, y)) {
                image[i] = 1.0;
            }
            if on_target && !on_marker {
                mask[i] = 1.0;
            }
        }
    }
    let target_ink_px = mask.iter().filter(|&&v| v > 0.0).count();
    if target_ink_px == 0 {
        return Err(PathfinderError::Infeasible(
            "marker covers the whole target contour; shrink marker_radius_px".into(),
        ));
    }

    Ok(PathfinderSample {
        image: Tensor::new([1, size, size, 1], image)?,
        mask: Tensor::new([1, size, size, 1], mask)?,
        meta: SampleMeta {
            seed,
            dash_count: config.target_dashes,
            distractor_count: config.n_distractor_contours,
            polyline: target.vertices,
            target_ink_px,
            per_dash_px,
        },
    })
}

/// Intersection-over-union of two binary masks; 1.0 when both are empty.
pub fn iou(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(TensorError::ShapeMismatch {
            op: "iou".into(),
            lhs: pred.shape(),
            rhs: truth.shape(),
        }
        .into());
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &t) in pred.data().iter().zip(truth.data().iter()) {
        let (p, t) = (p > 0.0, t > 0.0);
        if p && t {
            inter += 1;
        }
        if p || t {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Binarize logits at probability 0.5 (logit 0, strictly greater).
pub fn binarize_logits(logits: &Tensor) -> Tensor {
    logits.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bresenham_endpoints_and_connectivity() {
        let px = bresenham((0, 0), (5, 3));
        assert_eq!(*px.first().unwrap(), (0, 0));
        assert_eq!(*px.last().unwrap(), (5, 3));
        for w in px.windows(2) {
            assert!((w[1].0 - w[0].0).abs() <= 1 && (w[1].1 - w[0].1).abs() <= 1);
        }
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let cfg = PathfinderConfig {
            image_size: 32,
            target_dashes: 60,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(PathfinderError::Infeasible(_))));
        assert!(PathfinderConfig::default().validate().is_ok());
    }

    #[test]
    fn iou_trivial_cases() {
        let a = Tensor::new([1, 2, 2, 1], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new([1, 2, 2, 1], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let both = Tensor::new([1, 2, 2, 1], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(iou(&both, &a).unwrap(), 0.5);
        let empty = Tensor::zeros([1, 2, 2, 1]);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert!(iou(&a, &Tensor::zeros([1, 3, 3, 1])).is_err());
    }
}
