//! Deformable convolution with a learned offset branch.
//!
//! Every output location `p0` samples the input at `p0 + pn + dp_n` for each
//! kernel position `pn`, where `dp_n` comes from an offset field predicted by
//! an ordinary convolution over the same input. Fractional positions are
//! read with bilinear interpolation and zero padding outside the map.
//!
//! Offset field layout: `[N, 2*K, H, W]`, channel `2n` is the vertical and
//! `2n+1` the horizontal displacement of kernel position `n`, positions
//! enumerated row-major over the kernel (see [`KernelGrid`]).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Square-or-rectangular sampling grid with dilation 1, centered on `p0`.
///
/// Position `n` is `(ky - kh/2, kx - kw/2)` for `n = ky*kw + kx`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelGrid {
    pub kh: usize,
    pub kw: usize,
}

impl KernelGrid {
    pub fn square(k: usize) -> Self {
        Self { kh: k, kw: k }
    }

    pub fn len(&self) -> usize {
        self.kh * self.kw
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Relative `(dy, dx)` of kernel position `n`.
    pub fn position(&self, n: usize) -> (isize, isize) {
        let (ky, kx) = (n / self.kw, n % self.kw);
        (
            ky as isize - (self.kh / 2) as isize,
            kx as isize - (self.kw / 2) as isize,
        )
    }

    pub fn positions(&self) -> impl Iterator<Item = (isize, isize)> + '_ {
        (0..self.len()).map(|n| self.position(n))
    }

    /// Zero padding that keeps the spatial extent unchanged.
    pub fn same_padding(&self) -> usize {
        self.kh / 2
    }
}

/// Per-location displacement map produced by the offset branch.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField<T: Element = f32> {
    pub grid: KernelGrid,
    pub values: Tensor<T>,
}

impl<T: Element> OffsetField<T> {
    pub fn new(grid: KernelGrid, values: Tensor<T>) -> Result<Self> {
        let (_, c, _, _) = values.dims4()?;
        if c != 2 * grid.len() {
            return Err(Error::Dimension(format!(
                "offset field has {c} channels, expected {}",
                2 * grid.len()
            )));
        }
        values.check_finite("offset field")?;
        Ok(Self { grid, values })
    }

    /// `(dy, dx)` for sample `s`, kernel position `n`, location `(y, x)`.
    pub fn at(&self, s: usize, n: usize, y: usize, x: usize) -> (T, T) {
        let (_, c, h, w) = self.values.dims4().expect("checked in new");
        let base = s * c * h * w + y * w + x;
        let d = self.values.data();
        (d[base + 2 * n * h * w], d[base + (2 * n + 1) * h * w])
    }

    pub fn mean_abs(&self) -> f64 {
        let d = self.values.data();
        if d.is_empty() {
            return 0.0;
        }
        d.iter().map(|v| v.abs().as_f64()).sum::<f64>() / d.len() as f64
    }
}

/// Bilinear taps of one fractional position: four `(flat index, weight)`
/// pairs (index `None` outside the map) plus the partial derivatives of the
/// interpolation weights with respect to `y` and `x`.
#[derive(Clone, Copy, Debug)]
struct Taps<T> {
    idx: [Option<usize>; 4],
    w: [T; 4],
    dwy: [T; 4],
    dwx: [T; 4],
}

fn taps<T: Element>(y: T, x: T, h: usize, w: usize) -> Taps<T> {
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let (hy, hx) = (T::one() - ly, T::one() - lx);
    let one = T::one();
    let inside = |yy: T, xx: T| -> Option<usize> {
        if yy < T::zero() || xx < T::zero() || yy >= T::from_f64(h as f64) || xx >= T::from_f64(w as f64) {
            None
        } else {
            Some(yy.as_f64() as usize * w + xx.as_f64() as usize)
        }
    };
    Taps {
        idx: [
            inside(y0, x0),
            inside(y0, x0 + one),
            inside(y0 + one, x0),
            inside(y0 + one, x0 + one),
        ],
        w: [hy * hx, hy * lx, ly * hx, ly * lx],
        // d/dy and d/dx of the per-axis hat functions, taken from the floor
        // cell so that integer positions use the right-hand derivative.
        dwy: [-hx, -lx, hx, lx],
        dwx: [-hy, hy, -ly, ly],
    }
}

fn check_coord<T: Element>(y: T, x: T) -> Result<()> {
    if y.is_finite() && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite sampling coordinate".into()))
    }
}

/// Bilinearly interpolated `C`-vector of a `[C,H,W]` feature map at `(y, x)`.
/// Neighbors outside the map read as zero.
pub fn bilinear_sample<T: Element>(feature: &Tensor<T>, y: T, x: T) -> Result<Vec<T>> {
    let (c, h, w) = match feature.shape() {
        &[c, h, w] => (c, h, w),
        s => {
            return Err(Error::Dimension(format!(
                "bilinear_sample expects a C,H,W map, got {s:?}"
            )))
        }
    };
    check_coord(y, x)?;
    let t = taps(y, x, h, w);
    let d = feature.data();
    Ok((0..c)
        .map(|ch| {
            let plane = &d[ch * h * w..(ch + 1) * h * w];
            (0..4)
                .filter_map(|i| t.idx[i].map(|j| plane[j] * t.w[i]))
                .fold(T::zero(), |a, b| a + b)
        })
        .collect())
}

struct DeformGeometry {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    grid: KernelGrid,
}

impl DeformGeometry {
    fn rows(&self) -> usize {
        self.cin * self.grid.len()
    }

    fn cols(&self) -> usize {
        self.h * self.w
    }

    fn sample_taps<T: Element>(&self, offsets: &[T], s: usize, k: usize, p: usize) -> Result<Taps<T>> {
        let hw = self.cols();
        let base = s * 2 * self.grid.len() * hw;
        let dy = offsets[base + 2 * k * hw + p];
        let dx = offsets[base + (2 * k + 1) * hw + p];
        let (py, px) = self.grid.position(k);
        let y = T::from_f64((p / self.w) as f64 + py as f64) + dy;
        let x = T::from_f64((p % self.w) as f64 + px as f64) + dx;
        check_coord(y, x)?;
        Ok(taps(y, x, self.h, self.w))
    }

    /// Deformable columns of sample `s`: `(Cin*K) x (H*W)`.
    fn columns<T: Element>(&self, x: &[T], offsets: &[T], s: usize, cols: &mut [T]) -> Result<()> {
        let hw = self.cols();
        let k_len = self.grid.len();
        let xs = &x[s * self.cin * hw..(s + 1) * self.cin * hw];
        for k in 0..k_len {
            for p in 0..hw {
                let t = self.sample_taps(offsets, s, k, p)?;
                for c in 0..self.cin {
                    let plane = &xs[c * hw..(c + 1) * hw];
                    let mut v = T::zero();
                    for i in 0..4 {
                        if let Some(j) = t.idx[i] {
                            v = v + plane[j] * t.w[i];
                        }
                    }
                    cols[(c * k_len + k) * hw + p] = v;
                }
            }
        }
        Ok(())
    }
}

struct DeformConvOp<T: Element> {
    geometry: DeformGeometry,
    cols: Option<Vec<T>>,
}

impl<T: Element> CustomOp<T> for DeformConvOp<T> {
    fn name(&self) -> &'static str {
        "deform_conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = &self.geometry;
        let (x, offsets, weight) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let (rows, hw, k_len) = (g.rows(), g.cols(), g.grid.len());
        let dy = grad_output.data();

        let mut dx = needs[0].then(|| Tensor::zeros(inputs[0].shape()));
        let mut doff = needs[1].then(|| Tensor::zeros(inputs[1].shape()));
        let mut dw = needs[2].then(|| Tensor::zeros(inputs[2].shape()));
        let mut db = (needs.len() > 3 && needs[3]).then(|| Tensor::zeros(&[g.cout]));

        let mut dcols = vec![T::zero(); rows * hw];
        for s in 0..g.n {
            let dys = &dy[s * g.cout * hw..(s + 1) * g.cout * hw];
            if let Some(dw) = dw.as_mut() {
                let cols = self
                    .cols
                    .as_ref()
                    .ok_or_else(|| Error::Contract("deform_conv2d: columns were not saved".into()))?;
                let cs = &cols[s * rows * hw..(s + 1) * rows * hw];
                T::gemm(false, true, g.cout, hw, rows, T::one(), dys, cs, T::one(), dw.data_mut());
            }
            if let Some(db) = db.as_mut() {
                for (co, row) in dys.chunks(hw).enumerate() {
                    let slot = &mut db.data_mut()[co];
                    *slot = *slot + row.iter().copied().sum::<T>();
                }
            }
            if dx.is_none() && doff.is_none() {
                continue;
            }
            T::gemm(true, false, rows, g.cout, hw, T::one(), weight, dys, T::zero(), &mut dcols);
            let xs = &x[s * g.cin * hw..(s + 1) * g.cin * hw];
            for k in 0..k_len {
                for p in 0..hw {
                    let t = g.sample_taps(offsets, s, k, p)?;
                    let mut gy = T::zero();
                    let mut gx = T::zero();
                    for c in 0..g.cin {
                        let gcol = dcols[(c * k_len + k) * hw + p];
                        if gcol == T::zero() {
                            continue;
                        }
                        let plane = c * hw;
                        for i in 0..4 {
                            if let Some(j) = t.idx[i] {
                                if let Some(dx) = dx.as_mut() {
                                    let slot = &mut dx.data_mut()[s * g.cin * hw + plane + j];
                                    *slot = *slot + gcol * t.w[i];
                                }
                                let v = xs[plane + j];
                                gy = gy + gcol * v * t.dwy[i];
                                gx = gx + gcol * v * t.dwx[i];
                            }
                        }
                    }
                    if let Some(doff) = doff.as_mut() {
                        let base = s * 2 * k_len * hw;
                        let d = doff.data_mut();
                        d[base + 2 * k * hw + p] = d[base + 2 * k * hw + p] + gy;
                        d[base + (2 * k + 1) * hw + p] = d[base + (2 * k + 1) * hw + p] + gx;
                    }
                }
            }
        }
        let mut out = vec![dx, doff, dw];
        if needs.len() > 3 {
            out.push(db);
        }
        Ok(out)
    }
}

/// Record a deformable convolution (stride 1, same padding) on the graph.
///
/// `input: [N,Cin,H,W]`, `offsets: [N,2K,H,W]`, `weight: [Cout,Cin,kh,kw]`.
pub fn deform_conv2d<T: Element>(
    graph: &mut Graph<T>,
    input: Var,
    offsets: Var,
    weight: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let (n, cin, h, w) = graph.value(input).dims4()?;
    let (cout, wcin, kh, kw) = graph.value(weight).dims4()?;
    if wcin != cin {
        return Err(Error::Dimension(format!(
            "deform_conv2d: input has {cin} channels, weight expects {wcin}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Dimension("deform_conv2d: kernel extents must be odd".into()));
    }
    let grid = KernelGrid { kh, kw };
    if graph.value(offsets).shape() != [n, 2 * grid.len(), h, w] {
        return Err(Error::Dimension(format!(
            "deform_conv2d: offsets shape {:?}, expected {:?}",
            graph.value(offsets).shape(),
            [n, 2 * grid.len(), h, w]
        )));
    }
    if let Some(b) = bias {
        if graph.value(b).shape() != [cout] {
            return Err(Error::Dimension("deform_conv2d: bias shape mismatch".into()));
        }
    }
    let geometry = DeformGeometry {
        n,
        cin,
        cout,
        h,
        w,
        grid,
    };
    let (rows, hw) = (geometry.rows(), geometry.cols());
    let keep = graph.requires_grad(weight);
    let mut saved = keep.then(|| vec![T::zero(); n * rows * hw]);
    let mut scratch = vec![T::zero(); rows * hw];
    let mut out = vec![T::zero(); n * cout * hw];
    {
        let x = graph.value(input).data();
        let off = graph.value(offsets).data();
        let wv = graph.value(weight).data();
        let bv = bias.map(|b| graph.value(b).data());
        for s in 0..n {
            let cols: &mut [T] = match saved.as_mut() {
                Some(buf) => &mut buf[s * rows * hw..(s + 1) * rows * hw],
                None => &mut scratch,
            };
            geometry.columns(x, off, s, cols)?;
            let dst = &mut out[s * cout * hw..(s + 1) * cout * hw];
            T::gemm(false, false, cout, rows, hw, T::one(), wv, cols, T::zero(), dst);
            if let Some(b) = bv {
                for (co, row) in dst.chunks_mut(hw).enumerate() {
                    row.iter_mut().for_each(|v| *v = *v + b[co]);
                }
            }
        }
    }
    let output = Tensor::new(vec![n, cout, h, w], out)?;
    let mut inputs = vec![input, offsets, weight];
    inputs.extend(bias);
    graph.custom(
        inputs,
        output,
        Box::new(DeformConvOp {
            geometry,
            cols: saved,
        }),
    )
}

/// Graph handles of a layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct DeformVars {
    pub weight: Var,
    pub bias: Var,
    pub offset_weight: Var,
    pub offset_bias: Var,
}

/// Deformable layer: frozen-or-trainable regular weights plus an offset
/// branch (an ordinary convolution emitting `2K` channels).
#[derive(Clone, Debug, PartialEq)]
pub struct DeformLayer<T: Element = f32> {
    pub grid: KernelGrid,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub offset_weight: Tensor<T>,
    pub offset_bias: Tensor<T>,
    pub freeze_regular: bool,
}

impl<T: Element> DeformLayer<T> {
    /// Regular weights from an existing convolution, offset branch zeroed so
    /// the layer starts out equal to that convolution.
    pub fn from_conv(
        weight: Tensor<T>,
        bias: Tensor<T>,
        offset_kernel: usize,
        freeze_regular: bool,
    ) -> Result<Self> {
        let (cout, cin, kh, kw) = weight.dims4()?;
        if bias.shape() != [cout] {
            return Err(Error::Dimension("deform layer: bias shape mismatch".into()));
        }
        if kh % 2 == 0 || kw % 2 == 0 || offset_kernel % 2 == 0 {
            return Err(Error::Config("deformable kernels must have odd extents".into()));
        }
        let grid = KernelGrid { kh, kw };
        Ok(Self {
            grid,
            weight,
            bias,
            offset_weight: Tensor::zeros(&[2 * grid.len(), cin, offset_kernel, offset_kernel]),
            offset_bias: Tensor::zeros(&[2 * grid.len()]),
            freeze_regular,
        })
    }

    /// Random regular weights (He-normal), zero offset branch.
    pub fn random(cin: usize, cout: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        let std = (2.0 / (cin * kernel * kernel) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let weight = Tensor::from_fn(&[cout, cin, kernel, kernel], |_| T::from_f64(normal.sample(rng)));
        Self::from_conv(weight, Tensor::zeros(&[cout]), 3, false)
    }

    pub fn offset_kernel(&self) -> usize {
        self.offset_weight.shape()[2]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Register the parameters as leaves: the offset branch is always
    /// trainable, the regular weights only when not frozen.
    pub fn bind(&self, graph: &mut Graph<T>) -> Result<DeformVars> {
        let trainable = !self.freeze_regular;
        Ok(DeformVars {
            weight: graph.leaf(self.weight.clone(), trainable)?,
            bias: graph.leaf(self.bias.clone(), trainable)?,
            offset_weight: graph.param(self.offset_weight.clone())?,
            offset_bias: graph.param(self.offset_bias.clone())?,
        })
    }

    /// Offset branch then deformable sampling; returns `(output, offsets)`.
    pub fn forward_bound(&self, graph: &mut Graph<T>, input: Var, vars: &DeformVars) -> Result<(Var, Var)> {
        let pad = self.offset_kernel() / 2;
        let offsets = graph.conv2d(input, vars.offset_weight, Some(vars.offset_bias), 1, pad)?;
        let out = deform_conv2d(graph, input, offsets, vars.weight, Some(vars.bias))?;
        Ok((out, offsets))
    }

    pub fn forward(&self, graph: &mut Graph<T>, input: Var) -> Result<(Var, Var, DeformVars)> {
        let vars = self.bind(graph)?;
        let (out, off) = self.forward_bound(graph, input, &vars)?;
        Ok((out, off, vars))
    }

    /// Inference-only forward returning the output and the offset field.
    pub fn apply(&self, input: &Tensor<T>) -> Result<(Tensor<T>, OffsetField<T>)> {
        let mut g = Graph::new();
        let x = g.constant(input.clone())?;
        let vars = DeformVars {
            weight: g.constant(self.weight.clone())?,
            bias: g.constant(self.bias.clone())?,
            offset_weight: g.constant(self.offset_weight.clone())?,
            offset_bias: g.constant(self.offset_bias.clone())?,
        };
        let (out, off) = self.forward_bound(&mut g, x, &vars)?;
        Ok((
            g.value(out).clone(),
            OffsetField::new(self.grid, g.value(off).clone())?,
        ))
    }

    pub fn cast<U: Element>(&self) -> DeformLayer<U> {
        DeformLayer {
            grid: self.grid,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            offset_weight: self.offset_weight.cast(),
            offset_bias: self.offset_bias.cast(),
            freeze_regular: self.freeze_regular,
        }
    }
}
