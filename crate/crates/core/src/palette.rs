//! Label maps rendered as RGB targets, the nearest-colour inverse, and the
//! image/label-map blend used as an intermediate regression target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::Tensor3;

pub const MAX_CLASSES: usize = 256;
/// Minimum pairwise colour distance guaranteed for `K <= SEPARATED_UP_TO`.
pub const MIN_SEPARATION: f64 = 0.25;
pub const SEPARATED_UP_TO: usize = 125;

/// Fine lattice resolution per channel; every palette component is
/// `i / (FINE_LEVELS - 1)` and therefore exactly representable.
const FINE_LEVELS: usize = 9;
/// Coarse sub-lattice (spacing 0.25) used while it has unused points.
const COARSE_LEVELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub colors: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgbSegMap(pub Tensor3);

#[derive(Clone, Debug, PartialEq)]
pub struct InterpolatedImage {
    pub pixels: Tensor3,
    pub lambda: f64,
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn bit_reverse(mut v: usize, bits: u32) -> usize {
    let mut r = 0;
    for _ in 0..bits {
        r = (r << 1) | (v & 1);
        v >>= 1;
    }
    r
}

/// Lattice points visited in bit-reversed (van der Corput) order per axis,
/// so equal-distance ties resolve toward a spread-out traversal.
fn candidates(levels: usize) -> Vec<[f64; 3]> {
    let step = 1.0 / (levels - 1) as f64;
    let order: Vec<usize> = (0..16).map(|i| bit_reverse(i, 4)).filter(|&i| i < levels).collect();
    let mut out = Vec::with_capacity(levels.pow(3));
    for &r in &order {
        for &g in &order {
            for &b in &order {
                out.push([r as f64 * step, g as f64 * step, b as f64 * step]);
            }
        }
    }
    out
}

impl Palette {
    pub fn k(&self) -> usize {
        self.colors.len()
    }

    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.colors.len() {
            for j in i + 1..self.colors.len() {
                best = best.min(dist2(&self.colors[i], &self.colors[j]).sqrt());
            }
        }
        best
    }

    pub fn nearest(&self, rgb: &[f64; 3]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.colors.iter().enumerate() {
            let d = dist2(rgb, c);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }
}

/// Greedy farthest-point selection seeded with black for class 0, first
/// over the 0.25-spaced lattice (which keeps every pair at least
/// [`MIN_SEPARATION`] apart) and, once that is exhausted, over the 1/8-spaced
/// lattice.
pub fn make_palette(k: usize) -> Result<Palette> {
    if !(2..=MAX_CLASSES).contains(&k) {
        return Err(Error::Config(format!("palette size K={k} outside 2..={MAX_CLASSES}")));
    }
    let mut colors = vec![[0.0, 0.0, 0.0]];
    for (levels, limit) in [(COARSE_LEVELS, SEPARATED_UP_TO.min(k)), (FINE_LEVELS, k)] {
        let cands = candidates(levels);
        let mut nearest: Vec<f64> = cands
            .iter()
            .map(|c| colors.iter().map(|p| dist2(c, p)).fold(f64::INFINITY, f64::min))
            .collect();
        while colors.len() < limit {
            let mut pick = 0;
            for (i, &d) in nearest.iter().enumerate() {
                if d > nearest[pick] {
                    pick = i;
                }
            }
            let c = cands[pick];
            colors.push(c);
            for (n, cand) in nearest.iter_mut().zip(&cands) {
                *n = n.min(dist2(cand, &c));
            }
        }
    }
    Ok(Palette { colors })
}

pub fn project_labels(label: &LabelMap, palette: &Palette) -> Result<RgbSegMap> {
    label.validate(palette.k())?;
    let mut out = Tensor3::zeros(3, label.h, label.w);
    let hw = label.h * label.w;
    for (p, &v) in label.data.iter().enumerate() {
        let c = palette.colors[v as usize];
        for ch in 0..3 {
            out.data[ch * hw + p] = c[ch];
        }
    }
    Ok(RgbSegMap(out))
}

/// Per-pixel nearest palette colour; ties go to the lowest class index.
pub fn unproject(map: &Tensor3, palette: &Palette) -> LabelMap {
    let hw = map.hw();
    let data = (0..hw)
        .map(|p| {
            let rgb = [map.data[p], map.data[hw + p], map.data[2 * hw + p]];
            palette.nearest(&rgb) as u8
        })
        .collect();
    LabelMap::from_vec(map.h, map.w, data)
}

/// `lambda · image + (1 − lambda) · map`, elementwise.
pub fn interpolate(image: &Tensor3, map: &RgbSegMap, lambda: f64) -> Result<InterpolatedImage> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    if image.shape() != map.0.shape() {
        return Err(Error::Usage(format!(
            "interpolate: image shape {:?} differs from map shape {:?}",
            image.shape(),
            map.0.shape()
        )));
    }
    let data = image
        .data
        .iter()
        .zip(&map.0.data)
        .map(|(&x, &m)| lambda * x + (1.0 - lambda) * m)
        .collect();
    let (c, h, w) = image.shape();
    Ok(InterpolatedImage {
        pixels: Tensor3::from_vec(c, h, w, data),
        lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_class_palette() {
        let p = make_palette(2).unwrap();
        assert_eq!(p.colors[0], [0.0, 0.0, 0.0]);
        let c1 = p.colors[1];
        assert!((c1[0].powi(2) + c1[1].powi(2) + c1[2].powi(2)).sqrt() >= 0.25);
    }

    #[test]
    fn six_class_palette_is_separated() {
        let p = make_palette(6).unwrap();
        assert_eq!(p.k(), 6);
        assert!(p.min_separation() >= MIN_SEPARATION);
    }

    #[test]
    fn separation_holds_over_documented_range() {
        for k in 2..=SEPARATED_UP_TO {
            let p = make_palette(k).unwrap();
            assert!(p.min_separation() >= MIN_SEPARATION, "K={k}: {}", p.min_separation());
        }
        // Beyond the documented range colours stay distinct.
        assert!(make_palette(256).unwrap().min_separation() > 0.0);
    }

    #[test]
    fn out_of_range_k_is_rejected() {
        assert!(matches!(make_palette(300), Err(Error::Config(_))));
        assert!(matches!(make_palette(1), Err(Error::Config(_))));
    }

    #[test]
    fn palette_is_deterministic() {
        assert_eq!(make_palette(16).unwrap(), make_palette(16).unwrap());
    }

    #[test]
    fn all_zero_label_projects_to_black() {
        let p = make_palette(6).unwrap();
        let m = project_labels(&LabelMap::new(4, 4), &p).unwrap();
        assert!(m.0.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_classes_give_two_colours() {
        let p = make_palette(6).unwrap();
        let mut l = LabelMap::new(3, 3);
        l.set(1, 1, 1);
        l.set(2, 0, 1);
        let m = project_labels(&l, &p).unwrap();
        let mut seen: Vec<[u64; 3]> = (0..9)
            .map(|i| {
                [
                    m.0.data[i].to_bits(),
                    m.0.data[9 + i].to_bits(),
                    m.0.data[18 + i].to_bits(),
                ]
            })
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn out_of_range_label_names_coordinate() {
        let p = make_palette(3).unwrap();
        let mut l = LabelMap::new(4, 5);
        l.set(2, 3, 7);
        let err = project_labels(&l, &p).unwrap_err();
        assert!(err.to_string().contains("row 2, col 3"), "{err}");
    }

    #[test]
    fn noisy_colours_decode_to_original_class() {
        let p = make_palette(6).unwrap();
        let half = 0.5 * p.min_separation();
        // Perturb each channel by up to half/sqrt(3) so the L2 error stays below half.
        let eps = 0.999 * half / 3f64.sqrt();
        let mut map = Tensor3::zeros(3, 1, 6 * 8);
        let mut expected = Vec::new();
        for cls in 0..6 {
            for j in 0..8 {
                let px = cls * 8 + j;
                for ch in 0..3 {
                    let sign = if (j >> ch) & 1 == 0 { 1.0 } else { -1.0 };
                    map.data[ch * 48 + px] = p.colors[cls][ch] + sign * eps;
                }
                expected.push(cls as u8);
            }
        }
        assert_eq!(unproject(&map, &p).data, expected);
    }

    #[test]
    fn equidistant_pixel_takes_lower_class() {
        let p = make_palette(6).unwrap();
        let (a, b) = (p.colors[1], p.colors[2]);
        let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0];
        assert_eq!(dist2(&mid, &a), dist2(&mid, &b));
        let map = Tensor3::from_vec(3, 1, 1, mid.to_vec());
        assert_eq!(unproject(&map, &p).data, vec![1]);
    }

    #[test]
    fn interpolation_endpoints_and_published_lambda() {
        let x = Tensor3::filled(3, 4, 4, 0.5);
        let m = RgbSegMap(Tensor3::zeros(3, 4, 4));
        assert_eq!(interpolate(&x, &m, 1.0).unwrap().pixels, x);
        assert_eq!(interpolate(&x, &m, 0.0).unwrap().pixels, m.0);
        let mid = interpolate(&x, &m, 0.1).unwrap();
        assert!(mid.pixels.data.iter().all(|&v| (v - 0.05).abs() < 1e-16));
        assert!(matches!(interpolate(&x, &m, 1.5), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn unproject_inverts_projection(k in 2usize..=16, h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let p = make_palette(k).unwrap();
            let mut s = seed;
            let data = (0..h * w).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) % k as u64) as u8
            }).collect();
            let l = LabelMap::from_vec(h, w, data);
            prop_assert_eq!(unproject(&project_labels(&l, &p).unwrap().0, &p), l);
        }

        #[test]
        fn interpolation_is_affine_in_lambda(la in 0.0f64..=1.0, lb in 0.0f64..=1.0, xs in proptest::collection::vec(0.0f64..=1.0, 12), ms in proptest::collection::vec(0.0f64..=1.0, 12)) {
            let x = Tensor3::from_vec(3, 2, 2, xs);
            let m = RgbSegMap(Tensor3::from_vec(3, 2, 2, ms));
            let a = interpolate(&x, &m, la).unwrap().pixels;
            let b = interpolate(&x, &m, lb).unwrap().pixels;
            let c = interpolate(&x, &m, (la + lb) / 2.0).unwrap().pixels;
            for i in 0..12 {
                prop_assert!((a.data[i] + b.data[i] - 2.0 * c.data[i]).abs() < 1e-14);
                prop_assert!((0.0..=1.0).contains(&c.data[i]));
            }
        }
    }
}
