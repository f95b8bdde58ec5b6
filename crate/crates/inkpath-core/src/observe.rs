//! Visual-style observations and the rotated cross-correlation placement
//! scorer with pluggable feature embeddings, plus the cross-entropy metric
//! against one-hot pose labels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Pos;
use crate::object::{rotation_table, Pose};
use crate::scenario::{Level, Scenario};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ObserveError {
    #[error("crop around pick pose leaves the padded observation")]
    CropOutOfBounds,
    #[error("score map is not softmax-normalized")]
    NotNormalized,
}

/// Semantic cell classes, one-hot encoded in the observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellClass {
    Free = 0,
    Obstacle = 1,
    Ramp = 2,
    Forbidden = 3,
    Trace = 4,
    Electrode = 5,
}

pub const CLASS_COUNT: usize = 6;
/// Channel 0 is normalized surface height; the rest one-hot the class.
pub const CHANNELS: usize = 1 + CLASS_COUNT;
/// Heights are normalized by this scale (mm) in channel 0.
pub const HEIGHT_NORM_MM: f64 = 100.0;

/// Dense per-cell feature planes derived deterministically from a scenario.
/// Layout is channel-major: `data[c][y][x]` flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    data: Vec<f64>,
}

impl Observation {
    pub fn zeros(width: u32, height: u32, channels: u32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; (width * height * channels) as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: i32, y: i32, c: usize) -> f64 {
        if x < 0 || y < 0 || x >= self.width as i32 || y >= self.height as i32 {
            return 0.0; // zero padding outside the frame
        }
        self.data[(c * self.height as usize + y as usize) * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, c: usize, v: f64) {
        self.data[(c * self.height as usize + y as usize) * self.width as usize + x as usize] = v;
    }

    pub fn from_scenario(scenario: &Scenario) -> Observation {
        let surface = scenario.effective_surface();
        let (w, h) = (scenario.grid.width_cells, scenario.grid.height_cells);
        let mut obs = Observation::zeros(w, h, CHANNELS as u32);
        for y in 0..h as i32 {
            for x in 0..w as i32 {
                let p = Pos::new(x, y);
                let sc = surface.cells.get(p);
                obs.set(x as u32, y as u32, 0, sc.height_mm / HEIGHT_NORM_MM);
                let class = classify(scenario, p, sc.level);
                obs.set(x as u32, y as u32, 1 + class as usize, 1.0);
            }
        }
        obs
    }
}

fn classify(scenario: &Scenario, p: Pos, level: Level) -> CellClass {
    if scenario.is_electrode_cell(p) {
        return CellClass::Electrode;
    }
    if let Some(object) = scenario.object_at(p) {
        return if object.kind.is_ramp() {
            if scenario.trace_elevated_at(p) {
                CellClass::Trace
            } else {
                CellClass::Ramp
            }
        } else {
            CellClass::Obstacle
        };
    }
    debug_assert_eq!(level, Level::Ground);
    if scenario.trace_ground_at(p) {
        CellClass::Trace
    } else if *scenario.terrain.forbidden.get(p) {
        CellClass::Forbidden
    } else {
        CellClass::Free
    }
}

/// Normalization state of a score map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    Raw,
    Softmax,
}

/// Dense per-pose scores: one plane per rotation bin.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub width: u32,
    pub height: u32,
    pub bins: u8,
    pub normalization: Normalization,
    data: Vec<f64>,
}

impl ScoreMap {
    pub fn zeros(width: u32, height: u32, bins: u8) -> Self {
        Self {
            width,
            height,
            bins,
            normalization: Normalization::Raw,
            data: vec![0.0; width as usize * height as usize * bins as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, bin: u8) -> f64 {
        self.data[(bin as usize * self.height as usize + y as usize) * self.width as usize
            + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, bin: u8, v: f64) {
        self.data[(bin as usize * self.height as usize + y as usize) * self.width as usize
            + x as usize] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn pose_count(&self) -> usize {
        self.data.len()
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    /// Highest-scoring pose; ties resolve to the lexicographically first
    /// (y, x, bin).
    pub fn argmax(&self) -> Pose {
        let mut best = (0u32, 0u32, 0u8);
        let mut best_v = f64::NEG_INFINITY;
        for y in 0..self.height {
            for x in 0..self.width {
                for bin in 0..self.bins {
                    let v = self.get(x, y, bin);
                    if v > best_v {
                        best_v = v;
                        best = (x, y, bin);
                    }
                }
            }
        }
        Pose::new(best.0 as i32, best.1 as i32, best.2)
    }

    /// Image-wide softmax over every pose (all positions and bins jointly).
    pub fn softmax(&self) -> ScoreMap {
        let max = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = self.clone();
        let mut sum = 0.0;
        for v in &mut out.data {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in &mut out.data {
            *v /= sum;
        }
        out.normalization = Normalization::Softmax;
        out
    }
}

/// Feature embedding applied to the observation before correlation.
/// The identity embedding makes the placement scorer plain template
/// matching.
pub trait FeatureEmbedding {
    fn id(&self) -> &'static str;
    fn embed(&self, obs: &Observation) -> Observation;
}

pub struct IdentityFeatures;

impl FeatureEmbedding for IdentityFeatures {
    fn id(&self) -> &'static str {
        "identity"
    }
    fn embed(&self, obs: &Observation) -> Observation {
        obs.clone()
    }
}

/// Scales each channel plane by a fixed weight.
pub struct ChannelWeightedFeatures {
    pub weights: Vec<f64>,
}

impl FeatureEmbedding for ChannelWeightedFeatures {
    fn id(&self) -> &'static str {
        "channel-weighted"
    }
    fn embed(&self, obs: &Observation) -> Observation {
        assert_eq!(self.weights.len(), obs.channels as usize);
        let mut out = obs.clone();
        for c in 0..obs.channels as usize {
            for y in 0..obs.height as i32 {
                for x in 0..obs.width as i32 {
                    out.set(x as u32, y as u32, c, obs.get(x, y, c) * self.weights[c]);
                }
            }
        }
        out
    }
}

/// A square crop of an embedded observation, centered on a pick position.
fn crop(obs: &Observation, center: Pos, c: u32) -> Vec<f64> {
    let half = c as i32 / 2;
    let mut out = vec![0.0; (c * c) as usize * obs.channels as usize];
    for ch in 0..obs.channels as usize {
        for j in 0..c as i32 {
            for i in 0..c as i32 {
                out[(ch * c as usize + j as usize) * c as usize + i as usize] =
                    obs.get(center.x - half + i, center.y - half + j, ch);
            }
        }
    }
    out
}

/// Nearest-neighbor rotation of a square multi-channel crop by one bin.
/// Rotations at exact quarter turns are lossless permutations.
fn rotate_crop(data: &[f64], c: u32, channels: u32, bin: u8, k: u8) -> Vec<f64> {
    if bin == 0 {
        return data.to_vec();
    }
    let (cos_t, sin_t) = rotation_table(bin, k);
    let ctr = (c as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; data.len()];
    for j in 0..c as i32 {
        for i in 0..c as i32 {
            // Inverse-rotate the output cell into the source crop.
            let u = i as f64 - ctr;
            let v = j as f64 - ctr;
            let sx = (u * cos_t + v * sin_t + ctr).round() as i32;
            let sy = (-u * sin_t + v * cos_t + ctr).round() as i32;
            if sx < 0 || sy < 0 || sx >= c as i32 || sy >= c as i32 {
                continue;
            }
            for ch in 0..channels as usize {
                out[(ch * c as usize + j as usize) * c as usize + i as usize] =
                    data[(ch * c as usize + sy as usize) * c as usize + sx as usize];
            }
        }
    }
    out
}

/// Placement scoring by rotated cross-correlation: a crop around the pick
/// position slides over the embedded observation, once per rotation bin.
/// The observation is zero-padded, so every pose in the frame gets a score.
pub fn cross_correlate_place(
    obs: &Observation,
    pick: Pose,
    crop_size: u32,
    rotation_bins: u8,
    features: &dyn FeatureEmbedding,
) -> Result<ScoreMap, ObserveError> {
    if pick.x < 0 || pick.y < 0 || pick.x >= obs.width as i32 || pick.y >= obs.height as i32 {
        return Err(ObserveError::CropOutOfBounds);
    }
    let embedded = features.embed(obs);
    let template = crop(&embedded, pick.pos(), crop_size);
    let c = crop_size;
    let half = c as i32 / 2;
    let mut map = ScoreMap::zeros(obs.width, obs.height, rotation_bins);
    for bin in 0..rotation_bins {
        let rotated = rotate_crop(&template, c, obs.channels, bin, rotation_bins);
        for y in 0..obs.height as i32 {
            for x in 0..obs.width as i32 {
                let mut acc = 0.0;
                for ch in 0..obs.channels as usize {
                    for j in 0..c as i32 {
                        let oy = y - half + j;
                        if oy < 0 || oy >= obs.height as i32 {
                            continue;
                        }
                        for i in 0..c as i32 {
                            let t =
                                rotated[(ch * c as usize + j as usize) * c as usize + i as usize];
                            if t != 0.0 {
                                acc += t * embedded.get(x - half + i, oy, ch);
                            }
                        }
                    }
                }
                map.set(x as u32, y as u32, bin, acc);
            }
        }
    }
    Ok(map)
}

/// Cross-entropy of a softmax score map against a one-hot pose label:
/// `-ln p(label)`.
pub fn heatmap_cross_entropy(map: &ScoreMap, label: Pose) -> Result<f64, ObserveError> {
    if map.normalization != Normalization::Softmax || (map.sum() - 1.0).abs() > 1e-6 {
        return Err(ObserveError::NotNormalized);
    }
    if label.x < 0
        || label.y < 0
        || label.x >= map.width as i32
        || label.y >= map.height as i32
        || label.theta_bin >= map.bins
    {
        return Err(ObserveError::CropOutOfBounds);
    }
    let p = map.get(label.x as u32, label.y as u32, label.theta_bin);
    Ok(-p.ln())
}

/// Combined loss over a pick map and a place map, as used for one
/// demonstration step.
pub fn demo_cross_entropy(
    pick_map: &ScoreMap,
    pick_label: Pose,
    place_map: &ScoreMap,
    place_label: Pose,
) -> Result<f64, ObserveError> {
    Ok(heatmap_cross_entropy(pick_map, pick_label)?
        + heatmap_cross_entropy(place_map, place_label)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs_from(vals: &[&[f64]]) -> Observation {
        let h = vals.len() as u32;
        let w = vals[0].len() as u32;
        let mut obs = Observation::zeros(w, h, 1);
        for (y, row) in vals.iter().enumerate() {
            for (x, v) in row.iter().enumerate() {
                obs.set(x as u32, y as u32, 0, *v);
            }
        }
        obs
    }

    #[test]
    fn unique_patch_peaks_at_its_center() {
        let mut obs = Observation::zeros(16, 16, 1);
        for (dx, dy, v) in [(0, 0, 5.0), (1, 0, 2.0), (0, 1, 3.0), (1, 1, 7.0)] {
            obs.set((10 + dx) as u32, (11 + dy) as u32, 0, v);
        }
        let map =
            cross_correlate_place(&obs, Pose::new(10, 11, 0), 4, 1, &IdentityFeatures).unwrap();
        let best = map.argmax();
        assert_eq!((best.x, best.y), (10, 11));
    }

    #[test]
    fn constant_observation_ties_resolve_lexicographically() {
        let mut obs = Observation::zeros(8, 8, 1);
        for y in 0..8 {
            for x in 0..8 {
                obs.set(x, y, 0, 1.0);
            }
        }
        let map =
            cross_correlate_place(&obs, Pose::new(4, 4, 0), 2, 1, &IdentityFeatures).unwrap();
        let best = map.argmax();
        let expect = map.raw().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Scanning in (y, x, bin) order must find the same pose.
        let mut first = None;
        'outer: for y in 0..8u32 {
            for x in 0..8u32 {
                if map.get(x, y, 0) == expect {
                    first = Some((x, y));
                    break 'outer;
                }
            }
        }
        assert_eq!((best.x as u32, best.y as u32), first.unwrap());
    }

    #[test]
    fn quarter_turn_rotation_is_exact_permutation() {
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let rot90 = |d: &[f64]| -> Vec<f64> {
            // 90-degree rotation of a 4x4 array in the crop convention:
            // out(i,j) = in(inverse-rotated (i,j)).
            let c = 4i32;
            let ctr = (c - 1) as f64 / 2.0;
            let mut out = vec![0.0; 16];
            for j in 0..c {
                for i in 0..c {
                    let u = i as f64 - ctr;
                    let v = j as f64 - ctr;
                    let sx = (v + ctr) as i32;
                    let sy = (-u + ctr) as i32;
                    out[(j * c + i) as usize] = d[(sy * c + sx) as usize];
                }
            }
            out
        };
        for (steps, bin) in [(1usize, 2u8), (2, 4), (3, 6)] {
            let mut expect = data.clone();
            for _ in 0..steps {
                expect = rot90(&expect);
            }
            let got = rotate_crop(&data, 4, 1, bin, 8);
            let mut sorted_got = got.clone();
            let mut sorted_expect = expect.clone();
            sorted_got.sort_by(f64::total_cmp);
            sorted_expect.sort_by(f64::total_cmp);
            assert_eq!(sorted_got, sorted_expect, "bin {bin} not a permutation");
            assert_eq!(got, expect, "bin {bin} mismatch");
        }
    }

    #[test]
    fn softmax_normalizes_and_uniform_entropy_is_log_n() {
        let mut map = ScoreMap::zeros(5, 4, 2);
        for y in 0..4 {
            for x in 0..5 {
                for b in 0..2 {
                    map.set(x, y, b, 3.25);
                }
            }
        }
        let sm = map.softmax();
        assert!((sm.sum() - 1.0).abs() < 1e-9);
        let n = sm.pose_count() as f64;
        let ce = heatmap_cross_entropy(&sm, Pose::new(2, 2, 1)).unwrap();
        assert!((ce - n.ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_requires_softmax() {
        let map = ScoreMap::zeros(4, 4, 1);
        assert_eq!(
            heatmap_cross_entropy(&map, Pose::new(0, 0, 0)).unwrap_err(),
            ObserveError::NotNormalized
        );
    }

    #[test]
    fn probability_one_at_label_gives_zero_loss() {
        let mut map = ScoreMap::zeros(3, 3, 1);
        map.set(1, 2, 0, 1.0);
        let mut sm = map.clone();
        sm.normalization = Normalization::Softmax;
        let ce = heatmap_cross_entropy(&sm, Pose::new(1, 2, 0)).unwrap();
        assert_eq!(ce, 0.0);
    }

    #[test]
    fn translation_equivariance_on_interior() {
        let mut obs = Observation::zeros(8, 8, 1);
        for (x, y, v) in [(1, 1, 1.0), (2, 1, 2.0), (1, 2, 3.0), (2, 2, 4.0)] {
            obs.set(x, y, 0, v);
        }
        let mut shifted = Observation::zeros(8, 8, 1);
        for y in 0..8i32 {
            for x in 0..8i32 {
                shifted.set(x as u32, y as u32, 0, obs.get(x - 3, y - 2, 0));
            }
        }
        let m1 = cross_correlate_place(&obs, Pose::new(1, 1, 0), 4, 1, &IdentityFeatures).unwrap();
        let m2 =
            cross_correlate_place(&shifted, Pose::new(4, 3, 0), 4, 1, &IdentityFeatures).unwrap();
        let a1 = m1.argmax();
        let a2 = m2.argmax();
        assert_eq!((a2.x - a1.x, a2.y - a1.y), (3, 2));
    }

    #[test]
    fn channel_weighted_embedding_scales_scores() {
        let obs = obs_from(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let weighted = ChannelWeightedFeatures { weights: vec![2.0] };
        let m1 = cross_correlate_place(&obs, Pose::new(0, 0, 0), 2, 1, &IdentityFeatures).unwrap();
        let m2 = cross_correlate_place(&obs, Pose::new(0, 0, 0), 2, 1, &weighted).unwrap();
        for y in 0..2u32 {
            for x in 0..2u32 {
                assert!((m2.get(x, y, 0) - 4.0 * m1.get(x, y, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pick_outside_frame_is_rejected() {
        let obs = Observation::zeros(8, 8, 1);
        assert_eq!(
            cross_correlate_place(&obs, Pose::new(-1, 0, 0), 4, 1, &IdentityFeatures).unwrap_err(),
            ObserveError::CropOutOfBounds
        );
    }
}
