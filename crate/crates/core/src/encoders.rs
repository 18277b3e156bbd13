//! Feature vector to image encodings: Gramian Angular (summation) Field and
//! Recurrence Plot.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Row-major image, `channels x height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn square(side: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), side * side);
        Self { height: side, width: side, channels: 1, data }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Polar view of a unit-rescaled series: angle `arccos(x)` and radius `t/N`
/// for timestamps `t = 1..=N`. The radius does not enter the GAF matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarEncoding {
    pub phi: Vec<f64>,
    pub radius: Vec<f64>,
}

pub fn polar_encode(unit: &[f64]) -> PolarEncoding {
    let n = unit.len() as f64;
    PolarEncoding {
        phi: unit.iter().map(|x| x.clamp(0.0, 1.0).acos()).collect(),
        radius: (1..=unit.len()).map(|t| t as f64 / n).collect(),
    }
}

fn check_input(v: &[f64]) -> Result<()> {
    if v.len() < 2 {
        return Err(Error::input(format!("series needs at least 2 points, got {}", v.len())));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::input(format!("non-finite value at position {i}")));
    }
    Ok(())
}

/// Min-max rescaling to [0, 1]. A constant series maps to 0.5 everywhere.
pub fn rescale_unit(v: &[f64]) -> Result<Vec<f64>> {
    check_input(v)?;
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let span = hi - lo;
    if span == 0.0 {
        return Ok(vec![0.5; v.len()]);
    }
    Ok(v.iter().map(|x| ((x - lo) / span).clamp(0.0, 1.0)).collect())
}

/// GAF of an already rescaled series: `cos(phi_l + phi_k)`.
pub fn gaf_from_unit(unit: &[f64]) -> ImageTensor {
    let phi = polar_encode(unit).phi;
    let n = phi.len();
    let mut data = vec![0.0; n * n];
    for l in 0..n {
        for k in l..n {
            let g = (phi[l] + phi[k]).cos();
            data[l * n + k] = g;
            data[k * n + l] = g;
        }
    }
    ImageTensor::square(n, data)
}

/// The same field written without angles:
/// `x_l x_k - sqrt(1 - x_l^2) sqrt(1 - x_k^2)`.
pub fn gaf_product_form(unit: &[f64]) -> ImageTensor {
    let n = unit.len();
    let x: Vec<f64> = unit.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let s: Vec<f64> = x.iter().map(|v| (1.0 - v * v).sqrt()).collect();
    let mut data = vec![0.0; n * n];
    for l in 0..n {
        for k in 0..n {
            data[l * n + k] = x[l] * x[k] - s[l] * s[k];
        }
    }
    ImageTensor::square(n, data)
}

pub fn gaf_encode(v: &[f64]) -> Result<ImageTensor> {
    Ok(gaf_from_unit(&rescale_unit(v)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RpMode {
    /// Heaviside of `eps - d`.
    Binary,
    /// Grey level `1 - d / max(d)`.
    Distance,
}

pub fn rp_encode(v: &[f64], epsilon_frac: f64, mode: RpMode) -> Result<ImageTensor> {
    check_input(v)?;
    if !(epsilon_frac > 0.0 && epsilon_frac <= 1.0) {
        return Err(Error::input(format!("epsilon fraction must lie in (0, 1], got {epsilon_frac}")));
    }
    let n = v.len();
    let mut d = vec![0.0; n * n];
    let mut max_d: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dij = (v[i] - v[j]).abs();
            d[i * n + j] = dij;
            d[j * n + i] = dij;
            max_d = max_d.max(dij);
        }
    }
    if max_d == 0.0 {
        return Ok(ImageTensor::square(n, vec![1.0; n * n]));
    }
    let data = match mode {
        RpMode::Binary => {
            let eps = epsilon_frac * max_d;
            d.iter().map(|&x| if x <= eps { 1.0 } else { 0.0 }).collect()
        }
        RpMode::Distance => d.iter().map(|&x| 1.0 - x / max_d).collect(),
    };
    Ok(ImageTensor::square(n, data))
}

/// Area-averaging resize of a square single-channel image to `out x out`.
/// Reduces to plain average pooling when the side divides evenly.
pub fn downsample_area(img: &ImageTensor, out: usize) -> Result<ImageTensor> {
    if img.height != img.width || img.channels != 1 {
        return Err(Error::Shape("downsampling expects a square single-channel image".into()));
    }
    let n = img.height;
    if out == 0 || out > n {
        return Err(Error::input(format!("cannot resize {n}x{n} to {out}x{out}")));
    }
    if out == n {
        return Ok(img.clone());
    }
    // weights[i][k]: share of input cell k inside output cell i
    let step = n as f64 / out as f64;
    let mut weights = vec![vec![0.0; n]; out];
    for (i, row) in weights.iter_mut().enumerate() {
        let (a, b) = (i as f64 * step, (i + 1) as f64 * step);
        for (k, w) in row.iter_mut().enumerate() {
            let overlap = (b.min(k as f64 + 1.0) - a.max(k as f64)).max(0.0);
            *w = overlap / step;
        }
    }
    // rows first, then columns
    let mut tmp = vec![0.0; out * n];
    for (i, row) in weights.iter().enumerate() {
        for (k, &w) in row.iter().enumerate() {
            if w != 0.0 {
                for c in 0..n {
                    tmp[i * n + c] += w * img.data[k * n + c];
                }
            }
        }
    }
    let mut data = vec![0.0; out * out];
    for i in 0..out {
        for j in 0..out {
            data[i * out + j] = weights[j].iter().zip(&tmp[i * n..(i + 1) * n]).map(|(w, v)| w * v).sum();
        }
    }
    Ok(ImageTensor::square(out, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Encoder {
    Gaf,
    Rp { epsilon_frac: f64, mode: RpMode },
}

impl Encoder {
    pub fn rp_default() -> Self {
        Encoder::Rp { epsilon_frac: 0.1, mode: RpMode::Distance }
    }

    pub fn value_range(&self) -> (f64, f64) {
        match self {
            Encoder::Gaf => (-1.0, 1.0),
            Encoder::Rp { .. } => (0.0, 1.0),
        }
    }

    pub fn encode(&self, v: &[f64]) -> Result<ImageTensor> {
        match *self {
            Encoder::Gaf => gaf_encode(v),
            Encoder::Rp { epsilon_frac, mode } => rp_encode(v, epsilon_frac, mode),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeParams {
    pub encoder: Encoder,
    /// Downsample to this side length after encoding.
    pub image_size: Option<usize>,
}

pub fn encode_features(v: &[f64], params: &EncodeParams) -> Result<ImageTensor> {
    let img = params.encoder.encode(v)?;
    match params.image_size {
        Some(side) if side < img.height => downsample_area(&img, side),
        _ => Ok(img),
    }
}

/// One image per sample, order preserved.
pub fn encode_dataset(ds: &Dataset, params: &EncodeParams) -> Result<Vec<(ImageTensor, usize)>> {
    if let Some(first) = ds.samples.first() {
        let len = first.features.len();
        if let Some(i) = ds.samples.iter().position(|s| s.features.len() != len) {
            return Err(Error::Shape(format!("sample {i} has a different feature length")));
        }
    }
    ds.samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            encode_features(&s.features, params)
                .map(|img| (img, s.label))
                .map_err(|e| Error::input(format!("sample {i}: {e}")))
        })
        .collect()
}

/// Binary greyscale PGM (P5), mapping `[lo, hi]` onto 0..=255.
pub fn pgm_bytes(img: &ImageTensor, lo: f64, hi: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    out.extend(
        img.data[..img.width * img.height]
            .iter()
            .map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_pgm(path: &Path, img: &ImageTensor, lo: f64, hi: f64) -> Result<()> {
    fs::write(path, pgm_bytes(img, lo, hi))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale_unit(&[2.0, 4.0, 6.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(rescale_unit(&[3.0; 4]).unwrap(), vec![0.5; 4]);
        assert!(rescale_unit(&[1.0, f64::NAN]).is_err());
        assert!(rescale_unit(&[1.0]).is_err());
    }

    #[test]
    fn gaf_hand_values() {
        assert!(gaf_from_unit(&[1.0; 5]).data.iter().all(|&g| g == 1.0));
        let g = gaf_from_unit(&[0.0, 1.0]);
        let expect = [-1.0, 0.0, 0.0, 1.0];
        for (a, b) in g.data.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{:?}", g.data);
        }
    }

    #[test]
    fn rp_hand_values() {
        let r = rp_encode(&[0.0, 1.0], 0.5, RpMode::Binary).unwrap();
        assert_eq!(r.data, vec![1.0, 0.0, 0.0, 1.0]);
        let c = rp_encode(&[2.0; 6], 0.1, RpMode::Binary).unwrap();
        assert!(c.data.iter().all(|&x| x == 1.0));
        assert!(rp_encode(&[0.0, 1.0], 0.0, RpMode::Binary).is_err());
        assert!(rp_encode(&[0.0, f64::INFINITY], 0.5, RpMode::Distance).is_err());
    }

    #[test]
    fn downsample_even_is_average_pool() {
        let img = ImageTensor::square(4, (0..16).map(f64::from).collect());
        let d = downsample_area(&img, 2).unwrap();
        assert_eq!(d.data, vec![2.5, 4.5, 10.5, 12.5]);
        // total mass is preserved up to the area factor for uneven sides
        let img = ImageTensor::square(136, (0..136 * 136).map(|i| (i % 17) as f64).collect());
        let d = downsample_area(&img, 32).unwrap();
        let mean_in = img.data.iter().sum::<f64>() / img.data.len() as f64;
        let mean_out = d.data.iter().sum::<f64>() / d.data.len() as f64;
        assert!((mean_in - mean_out).abs() < 1e-9);
    }

    #[test]
    fn pgm_header() {
        let img = ImageTensor::square(2, vec![-1.0, 0.0, 0.5, 1.0]);
        let b = pgm_bytes(&img, -1.0, 1.0);
        assert_eq!(&b[..11], b"P5\n2 2\n255\n");
        assert_eq!(&b[11..], &[0, 128, 191, 255]);
    }

    proptest! {
        #[test]
        fn gaf_forms_agree(v in prop::collection::vec(-1e3f64..1e3, 2..40)) {
            let x = rescale_unit(&v).unwrap();
            let a = gaf_from_unit(&x);
            let b = gaf_product_form(&x);
            for (p, q) in a.data.iter().zip(&b.data) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
            prop_assert!(a.data.iter().all(|g| (-1.0..=1.0).contains(g)));
            let phi = polar_encode(&x).phi;
            for (l, p) in phi.iter().enumerate() {
                prop_assert!((a.at(l, l) - (2.0 * p).cos()).abs() < 1e-15);
            }
        }

        #[test]
        fn rp_symmetric_unit_diagonal(v in prop::collection::vec(-10f64..10.0, 2..40), eps in 0.01f64..1.0) {
            for mode in [RpMode::Binary, RpMode::Distance] {
                let r = rp_encode(&v, eps, mode).unwrap();
                let n = v.len();
                for i in 0..n {
                    prop_assert_eq!(r.at(i, i), 1.0);
                    for j in 0..n {
                        prop_assert_eq!(r.at(i, j), r.at(j, i));
                        prop_assert!((0.0..=1.0).contains(&r.at(i, j)));
                        if mode == RpMode::Binary {
                            prop_assert!(r.at(i, j) == 0.0 || r.at(i, j) == 1.0);
                        }
                    }
                }
            }
        }
    }
}
