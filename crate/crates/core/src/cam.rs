//! Class activation maps, feature clipping, soft maps and seed extraction.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::resize_bilinear;
use crate::model::{ClassifierHead, Model};
use crate::tensor::{Element, Tensor};

/// Per-class spatial map with values in `[0, 1]`, stored as `[C, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationMap {
    pub values: Tensor,
    /// Image scales the map was fused from.
    pub scales: Vec<f64>,
}

impl LocalizationMap {
    pub fn classes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn plane(&self, class_id: usize) -> &[f32] {
        let hw = self.height() * self.width();
        &self.values.data()[class_id * hw..(class_id + 1) * hw]
    }

    /// Mean value of a class plane.
    pub fn area(&self, class_id: usize) -> f64 {
        let p = self.plane(class_id);
        p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64
    }
}

/// Per-pixel label: 0 is background, `c + 1` is class `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl SeedMask {
    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }
}

fn features_dhw(features: &Tensor) -> Result<(usize, usize, usize)> {
    match features.shape() {
        &[d, h, w] | &[1, d, h, w] => Ok((d, h, w)),
        s => Err(Error::Dimension(format!(
            "expected a single D,H,W feature map, got {s:?}"
        ))),
    }
}

/// `w_c^T f` at every position, without the bias.
fn raw_evidence(features: &Tensor, head: &ClassifierHead, class_id: usize) -> Result<Vec<f32>> {
    let (d, h, w) = features_dhw(features)?;
    if d != head.dim() {
        return Err(Error::Dimension(format!(
            "features have {d} channels, head expects {}",
            head.dim()
        )));
    }
    if class_id >= head.classes() {
        return Err(Error::Contract(format!(
            "class {class_id} out of range for {} classes",
            head.classes()
        )));
    }
    let wc = &head.weight.data()[class_id * d..(class_id + 1) * d];
    let hw = h * w;
    let f = features.data();
    let mut out = vec![0.0f32; hw];
    for (ch, &weight) in wc.iter().enumerate() {
        let plane = &f[ch * hw..(ch + 1) * hw];
        out.iter_mut().zip(plane).for_each(|(o, &v)| *o += weight * v);
    }
    Ok(out)
}

/// Divide by the maximum after clamping negatives; an all-non-positive
/// plane becomes all zeros.
fn max_normalize(plane: &mut [f32]) {
    plane.iter_mut().for_each(|v| *v = v.max(0.0));
    let m = plane.iter().copied().fold(0.0f32, f32::max);
    if m > 0.0 {
        plane.iter_mut().for_each(|v| *v /= m);
    }
}

/// CAM of one class at feature resolution, `[h, w]`.
pub fn cam(features: &Tensor, head: &ClassifierHead, class_id: usize) -> Result<Tensor> {
    let (_, h, w) = features_dhw(features)?;
    let mut plane = raw_evidence(features, head, class_id)?;
    max_normalize(&mut plane);
    Tensor::new(vec![h, w], plane)
}

/// CAMs of every class at feature resolution.
pub fn cam_all(features: &Tensor, head: &ClassifierHead) -> Result<LocalizationMap> {
    let (_, h, w) = features_dhw(features)?;
    let mut data = Vec::with_capacity(head.classes() * h * w);
    for c in 0..head.classes() {
        data.extend(cam(features, head, c)?.into_data());
    }
    Ok(LocalizationMap {
        values: Tensor::new(vec![head.classes(), h, w], data)?,
        scales: vec![1.0],
    })
}

fn clip_caps<T: Element>(x: &Tensor<T>, beta: f64) -> Result<Vec<T>> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Contract(format!("clip ratio must lie in (0, 1], got {beta}")));
    }
    let n = x.shape().first().copied().unwrap_or(1).max(1);
    let block = x.numel() / n;
    Ok(x.data()
        .chunks(block.max(1))
        .map(|s| {
            let m = s.iter().copied().fold(T::zero(), |a, b| if b > a { b } else { a });
            if m > T::zero() {
                T::from_f64(beta) * m
            } else {
                // all-zero sample: clipping would flatten it to zero
                T::infinity()
            }
        })
        .collect())
}

/// Cap every value at `beta * max` of its sample, max taken jointly over
/// channels and positions. Input is `[N, ...]`; all-zero samples pass
/// through unchanged.
pub fn clip_features<T: Element>(features: &Tensor<T>, beta: f64) -> Result<Tensor<T>> {
    let caps = clip_caps(features, beta)?;
    let block = features.numel() / caps.len().max(1);
    let data = features
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let cap = caps[i / block.max(1)];
            if v >= cap {
                cap
            } else {
                v
            }
        })
        .collect();
    Tensor::new(features.shape().to_vec(), data)
}

/// Differentiable clipping: the cap is computed from the forward values and
/// treated as a constant.
pub fn clip_features_graph<T: Element>(g: &mut Graph<T>, x: Var, beta: f64) -> Result<Var> {
    let caps = clip_caps(g.value(x), beta)?;
    g.clamp_max_per_sample(x, caps)
}

/// `sigmoid(evidence)` maps in `[0, 1]`, differentiable.
pub fn soft_maps<T: Element>(g: &mut Graph<T>, evidence: Var) -> Result<Var> {
    g.sigmoid(evidence)
}

/// Fused multi-scale CAM at the image resolution.
///
/// For every scale the image is resized, its CAMs are computed and resized
/// back, the per-scale maps are averaged and each class is renormalized by
/// its spatial maximum.
pub fn multiscale_cam(model: &Model, image: &Tensor, scales: &[f64]) -> Result<LocalizationMap> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] | &[1, c, h, w] => (c, h, w),
        s => return Err(Error::Dimension(format!("expected one image, got {s:?}"))),
    };
    if scales.is_empty() {
        return Err(Error::Config("multi-scale CAM needs at least one scale".into()));
    }
    let classes = model.config.classes;
    let mut acc = vec![0.0f32; classes * h * w];
    for &s in scales {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Config(format!("invalid CAM scale {s}")));
        }
        let sh = (h as f64 * s).round() as usize;
        let sw = (w as f64 * s).round() as usize;
        if sh == 0 || sw == 0 || model.config.feature_size(sh, sw).is_none() {
            return Err(Error::Config(format!(
                "scale {s} shrinks the {h}x{w} image below the network's minimum size"
            )));
        }
        let resized = if (sh, sw) == (h, w) {
            image.data().to_vec()
        } else {
            resize_bilinear(image.data(), c, h, w, sh, sw)
        };
        let input = Tensor::new(vec![1, c, sh, sw], resized)?;
        let features = model.forward_features(&input)?;
        let maps = cam_all(&features, &model.head)?;
        let (fh, fw) = (maps.height(), maps.width());
        let up = resize_bilinear(maps.values.data(), classes, fh, fw, h, w);
        acc.iter_mut().zip(&up).for_each(|(a, &u)| *a += u);
    }
    let k = scales.len() as f32;
    acc.iter_mut().for_each(|v| *v /= k);
    for plane in acc.chunks_mut(h * w) {
        max_normalize(plane);
    }
    Ok(LocalizationMap {
        values: Tensor::new(vec![classes, h, w], acc)?,
        scales: scales.to_vec(),
    })
}

/// Label each pixel with the present class of highest map value if that
/// value reaches `tau`, else background. Ties go to the lower class id.
pub fn threshold_seed(map: &LocalizationMap, present: &[usize], tau: f64) -> Result<SeedMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Contract(format!("threshold must lie in (0, 1), got {tau}")));
    }
    let (h, w) = (map.height(), map.width());
    let mut classes: Vec<usize> = present.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if let Some(&c) = classes.iter().find(|&&c| c >= map.classes()) {
        return Err(Error::Contract(format!("present class {c} not in map")));
    }
    let mut mask = SeedMask::background(h, w);
    for (p, label) in mask.labels.iter_mut().enumerate() {
        let mut best: Option<(usize, f32)> = None;
        for &c in &classes {
            let v = map.plane(c)[p];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        if let Some((c, v)) = best {
            if v as f64 >= tau {
                *label = (c + 1) as u8;
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(weights: Vec<f32>, classes: usize) -> ClassifierHead {
        let d = weights.len() / classes;
        ClassifierHead {
            weight: Tensor::new(vec![classes, d], weights).unwrap(),
            bias: Tensor::zeros(&[classes]),
        }
    }

    #[test]
    fn single_peak_and_constant_evidence() {
        let mut f = Tensor::zeros(&[1, 3, 3]);
        f.data_mut()[4] = 2.0;
        let m = cam(&f, &head(vec![0.5], 1), 0).unwrap();
        let mut expect = vec![0.0; 9];
        expect[4] = 1.0;
        assert_eq!(m.data(), &expect[..]);

        let f = Tensor::full(&[2, 2, 2], 0.7);
        let m = cam(&f, &head(vec![1.0, 0.5], 1), 0).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_positive_evidence_gives_zero_map() {
        let f = Tensor::full(&[1, 2, 2], 1.0);
        let m = cam(&f, &head(vec![-1.0], 1), 0).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clip_examples() {
        let mut f = Tensor::zeros(&[1, 1, 1, 3]);
        f.data_mut().copy_from_slice(&[10.0f32, 3.0, 1.0]);
        let c = clip_features(&f, 0.15).unwrap();
        assert_eq!(c.data()[0], 1.5);
        assert_eq!(c.data()[1], 1.5);
        assert_eq!(c.data()[2], 1.0);
        let same = clip_features(&f, 1.0).unwrap();
        assert_eq!(same, f);
        let zero = Tensor::<f32>::zeros(&[2, 2, 2, 2]);
        assert_eq!(clip_features(&zero, 0.15).unwrap(), zero);
        assert!(clip_features(&f, 0.0).is_err());
        assert!(clip_features(&f, 1.5).is_err());
    }

    #[test]
    fn soft_map_examples() {
        let mut g = Graph::<f32>::new();
        let e = g.constant(Tensor::zeros(&[1, 2, 2, 2])).unwrap();
        let s = soft_maps(&mut g, e).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.5));
        let e = g.constant(Tensor::full(&[1, 1, 2, 2], -50.0)).unwrap();
        let s = soft_maps(&mut g, e).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v < 1e-20));
        let mut t = Tensor::zeros(&[1, 1, 2, 2]);
        t.data_mut()[3] = 0.3;
        let e = g.constant(t).unwrap();
        let s = soft_maps(&mut g, e).unwrap();
        let v = g.value(s).data();
        assert!(v[3] > 0.5 && v[..3].iter().all(|&x| x == 0.5));
    }

    fn map(values: Vec<f32>, c: usize, h: usize, w: usize) -> LocalizationMap {
        LocalizationMap {
            values: Tensor::new(vec![c, h, w], values).unwrap(),
            scales: vec![1.0],
        }
    }

    #[test]
    fn threshold_examples() {
        let m = map(vec![0.0; 8], 2, 2, 2);
        let s = threshold_seed(&m, &[0, 1], 0.3).unwrap();
        assert!(s.labels.iter().all(|&l| l == 0));

        let m = map(vec![0.9, 0.1, 0.5, 0.2], 1, 2, 2);
        let s = threshold_seed(&m, &[0], 0.4).unwrap();
        assert_eq!(s.labels, vec![1, 0, 1, 0]);

        // tie at pixel 0 goes to class 0, pixel 1 to class 1
        let m = map(vec![0.6, 0.2, 0.6, 0.7], 2, 1, 2);
        let s = threshold_seed(&m, &[1, 0], 0.3).unwrap();
        assert_eq!(s.labels, vec![1, 2]);
        // absent classes are ignored
        let s = threshold_seed(&m, &[0], 0.3).unwrap();
        assert_eq!(s.labels, vec![1, 0]);
        assert!(threshold_seed(&m, &[0], 1.0).is_err());
    }
}
