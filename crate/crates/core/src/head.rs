//! Windowed winner-take-all disparity regression, occlusion probability,
//! bilinear upsampling and the context adjustment layer.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

/// Regression window `[lo, hi]` (inclusive) of one source sample, or `None`
/// for a row without any non-dustbin mass in its window.
type Window = Option<(usize, usize)>;

/// Per-row windows around the most probable non-dustbin match.
///
/// `t` is `[B, W+1, W+1]` (row-normalized coupling with dustbins); only the
/// first `W` rows and columns are read.
fn windows<F: Scalar>(t: &Tensor<F>) -> Vec<Window> {
    let (batch, m) = (t.shape()[0], t.shape()[1]);
    let w = m - 1;
    let mut out = Vec::with_capacity(batch * w);
    for b in 0..batch {
        for i in 0..w {
            let row = &t.data()[(b * m + i) * m..(b * m + i) * m + w];
            let mut k = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[k] {
                    k = j;
                }
            }
            let (lo, hi) = (k.saturating_sub(1), (k + 1).min(w - 1));
            let mass = row[lo..=hi].iter().fold(F::zero(), |a, &v| a + v);
            out.push((mass > F::zero()).then_some((lo, hi)));
        }
    }
    out
}

/// Renormalized window weights per source sample: the first window column
/// and the weights, or `None` when the window carries no mass.
pub fn window_weights<F: Scalar>(t: &Tensor<F>) -> Result<Vec<Option<(usize, Vec<f64>)>>> {
    if t.rank() != 3 || t.shape()[1] != t.shape()[2] || t.shape()[1] < 2 {
        return Err(Error::dim("window_weights", format!("{:?}", t.shape())));
    }
    let m = t.shape()[1];
    Ok(windows(t)
        .into_iter()
        .enumerate()
        .map(|(k, win)| {
            win.map(|(lo, hi)| {
                let (b, i) = (k / (m - 1), k % (m - 1));
                let row = &t.data()[(b * m + i) * m..];
                let mass: f64 = row[lo..=hi].iter().map(|v| v.as_f64()).sum();
                (lo, row[lo..=hi].iter().map(|v| v.as_f64() / mass).collect())
            })
        })
        .collect())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Quantity {
    Disparity,
    Occlusion,
}

struct Regress {
    stride: usize,
    what: Quantity,
    windows: Vec<Window>,
    dims: (usize, usize),
}

impl Regress {
    fn new<F: Scalar>(t: &Tensor<F>, stride: usize, what: Quantity) -> Self {
        let (batch, w) = (t.shape()[0], t.shape()[1] - 1);
        Self {
            stride,
            what,
            windows: windows(t),
            dims: (batch, w),
        }
    }

    fn candidate(&self, i: usize, l: usize) -> f64 {
        (i as f64 - l as f64) * self.stride as f64
    }

    /// `(disparity, occlusion, window mass)` for sample `(b, i)`.
    fn eval<F: Scalar>(&self, t: &Tensor<F>, b: usize, i: usize) -> (F, F, F) {
        let (_, w) = self.dims;
        let m = w + 1;
        match self.windows[b * w + i] {
            None => (F::zero(), F::one(), F::zero()),
            Some((lo, hi)) => {
                let row = &t.data()[(b * m + i) * m..];
                let mass = row[lo..=hi].iter().fold(F::zero(), |a, &v| a + v);
                let d = (lo..=hi).fold(F::zero(), |a, l| a + F::from_f64(self.candidate(i, l)) * (row[l] / mass));
                (d, F::one() - mass, mass)
            }
        }
    }

    fn forward<F: Scalar>(&self, t: &Tensor<F>) -> Result<Tensor<F>> {
        let (batch, w) = self.dims;
        let mut out = Vec::with_capacity(batch * w);
        for b in 0..batch {
            for i in 0..w {
                let (d, o, _) = self.eval(t, b, i);
                out.push(if self.what == Quantity::Disparity { d } else { o });
            }
        }
        Tensor::new(vec![batch, w], out)
    }
}

impl<F: Scalar> CustomOp<F> for Regress {
    fn name(&self) -> &'static str {
        match self.what {
            Quantity::Disparity => "regress_disparity",
            Quantity::Occlusion => "regress_occlusion",
        }
    }

    fn backward(&self, inputs: &[&Tensor<F>], out: &Tensor<F>, grad: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let t = inputs[0];
        let (batch, w) = self.dims;
        let m = w + 1;
        let mut gt = Tensor::zeros(t.shape().to_vec());
        for b in 0..batch {
            for i in 0..w {
                let Some((lo, hi)) = self.windows[b * w + i] else { continue };
                let gv = grad.data()[b * w + i];
                let row = (b * m + i) * m;
                let mass = t.data()[row + lo..=row + hi].iter().fold(F::zero(), |a, &v| a + v);
                for l in lo..=hi {
                    let dl = match self.what {
                        // ∂/∂t_l of Σ d_l t_l / Σ t_l
                        Quantity::Disparity => (F::from_f64(self.candidate(i, l)) - out.data()[b * w + i]) / mass,
                        Quantity::Occlusion => -F::one(),
                    };
                    gt.data_mut()[row + l] = gv * dl;
                }
            }
        }
        Ok(vec![Some(gt)])
    }
}

/// Raw disparity `[B, W]` and occlusion probability `[B, W]` from a
/// row-normalized coupling `[B, W+1, W+1]`. Candidates are expressed in
/// full-resolution pixels: `d_l = (i − l)·s`.
pub fn regress_graph<F: Scalar>(g: &mut Graph<'_, F>, t: Var, stride: usize) -> Result<(Var, Var)> {
    let s = g.shape(t).to_vec();
    if s.len() != 3 || s[1] != s[2] || s[1] < 2 {
        return Err(Error::dim("regress_raw", format!("{s:?}")));
    }
    let dop = Regress::new(g.value(t), stride, Quantity::Disparity);
    let oop = Regress::new(g.value(t), stride, Quantity::Occlusion);
    let dv = dop.forward(g.value(t))?;
    let ov = oop.forward(g.value(t))?;
    let d = g.custom(&[t], dv, Rc::new(dop))?;
    let o = g.custom(&[t], ov, Rc::new(oop))?;
    Ok((d, o))
}

/// Strided raw estimates, `[rows, W_s]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDisparityMap<F> {
    pub disparity: Tensor<F>,
    pub occlusion: Tensor<F>,
    /// Window mass `Σ t_l`.
    pub confidence: Tensor<F>,
}

/// Tensor-level regression of a coupling `[W+1, W+1]` or `[B, W+1, W+1]`.
pub fn regress_raw<F: Scalar>(t: &Tensor<F>, stride: usize) -> Result<RawDisparityMap<F>> {
    let t = match t.rank() {
        2 => t.clone().reshape(vec![1, t.shape()[0], t.shape()[1]])?,
        3 => t.clone(),
        _ => return Err(Error::dim("regress_raw", format!("{:?}", t.shape()))),
    };
    if t.shape()[1] != t.shape()[2] || t.shape()[1] < 2 {
        return Err(Error::dim("regress_raw", format!("{:?}", t.shape())));
    }
    let op = Regress::new(&t, stride, Quantity::Disparity);
    let (batch, w) = op.dims;
    let (mut d, mut o, mut c) = (Vec::new(), Vec::new(), Vec::new());
    for b in 0..batch {
        for i in 0..w {
            let (dv, ov, cv) = op.eval(&t, b, i);
            d.push(dv);
            o.push(ov);
            c.push(cv);
        }
    }
    Ok(RawDisparityMap {
        disparity: Tensor::new(vec![batch, w], d)?,
        occlusion: Tensor::new(vec![batch, w], o)?,
        confidence: Tensor::new(vec![batch, w], c)?,
    })
}

/// Linear interpolation weights from `n_s` samples at `0, s, 2s, …` to `n`
/// pixels, `[n, n_s]`. Pixels past the last sample take its value.
fn interp_matrix(n: usize, n_s: usize, s: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n_s];
    for y in 0..n {
        let pos = y as f64 / s as f64;
        let i0 = (pos.floor() as usize).min(n_s - 1);
        let frac = pos - i0 as f64;
        if i0 + 1 < n_s && frac > 0.0 {
            m[y * n_s + i0] = 1.0 - frac;
            m[y * n_s + i0 + 1] = frac;
        } else {
            m[y * n_s + i0] = 1.0;
        }
    }
    m
}

/// Bilinear upsampling of a strided map `[H_s, W_s]` to `[H, W]`.
pub fn upsample_full<F: Scalar>(g: &mut Graph<'_, F>, x: Var, stride: usize, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 || s[0] != h.div_ceil(stride) || s[1] != w.div_ceil(stride) {
        return Err(Error::dim("upsample_full", format!("{s:?} at stride {stride} to {h}x{w}")));
    }
    if stride == 1 {
        return Ok(x);
    }
    let uh = g.input(Tensor::from_f64(vec![h, s[0]], &interp_matrix(h, s[0], stride))?)?;
    let uw = interp_matrix(w, s[1], stride);
    let mut uwt = vec![0.0; uw.len()];
    for p in 0..w {
        for j in 0..s[1] {
            uwt[j * w + p] = uw[p * s[1] + j];
        }
    }
    let uwt = g.input(Tensor::from_f64(vec![s[1], w], &uwt)?)?;
    let rows = g.matmul(uh, x)?;
    g.matmul(rows, uwt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CALConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub expansion: usize,
    pub kernel: usize,
}

impl Default for CALConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            hidden: 16,
            expansion: 4,
            kernel: 3,
        }
    }
}

impl CALConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.expansion == 0 || self.hidden == 0 {
            return Err(Error::Config("CAL needs blocks, hidden width and expansion ≥ 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("CAL kernel size {} must be odd", self.kernel)));
        }
        Ok(())
    }

    /// Registers every convolution. The final disparity convolution starts at
    /// zero so the refined output initially equals the raw estimate.
    pub fn register<F: Scalar, R: Rng>(&self, store: &mut ParameterStore<F>, image_channels: usize, rng: &mut R) -> Result<()> {
        self.validate()?;
        let k = self.kernel;
        let mut conv = |store: &mut ParameterStore<F>, name: &str, cin: usize, cout: usize, zero: bool| -> Result<()> {
            if zero {
                store.register_zeros(format!("cal.{name}.w"), vec![cout, cin, k, k])?;
            } else {
                store.register_uniform(format!("cal.{name}.w"), vec![cout, cin, k, k], cin * k * k, cout * k * k, rng)?;
            }
            store.register_zeros(format!("cal.{name}.b"), vec![cout])?;
            Ok(())
        };
        let cin = 2 + image_channels;
        let (h, e) = (self.hidden, self.hidden * self.expansion);
        conv(store, "start", cin, h, false)?;
        for b in 0..self.blocks {
            conv(store, &format!("block{b}.expand"), h + 1, e, false)?;
            conv(store, &format!("block{b}.restore"), e, h, false)?;
        }
        conv(store, "end", h + 1, 1, true)?;
        conv(store, "occ0", cin, h, false)?;
        conv(store, "occ1", h, 1, false)?;
        Ok(())
    }
}

fn conv<F: Scalar>(g: &mut Graph<'_, F>, x: Var, name: &str) -> Result<Var> {
    let w = g.param_named(&format!("cal.{name}.w"))?;
    let b = g.param_named(&format!("cal.{name}.b"))?;
    g.conv2d(x, w, b)
}

/// Refines full-resolution raw disparity and occlusion (`[H, W]` each)
/// conditioned on the left image `[C_img, H, W]`.
///
/// Returns `(disparity [H, W], occlusion [H, W])`.
pub fn context_adjust<F: Scalar>(
    g: &mut Graph<'_, F>,
    raw_disp: Var,
    raw_occ: Var,
    left: Var,
    cfg: &CALConfig,
) -> Result<(Var, Var)> {
    let (sd, so, sl) = (g.shape(raw_disp).to_vec(), g.shape(raw_occ).to_vec(), g.shape(left).to_vec());
    if sd.len() != 2 || sd != so || sl.len() != 3 || sl[1..] != sd[..] {
        return Err(Error::dim(
            "context_adjust",
            format!("disparity {sd:?}, occlusion {so:?}, image {sl:?}"),
        ));
    }
    let (h, w) = (sd[0], sd[1]);
    let d1 = g.reshape(raw_disp, vec![1, h, w])?;
    let o1 = g.reshape(raw_occ, vec![1, h, w])?;
    let x0 = g.concat0(&[d1, o1, left])?;

    let mut feat = conv(g, x0, "start")?;
    for b in 0..cfg.blocks {
        let inp = g.concat0(&[feat, d1])?;
        let e = conv(g, inp, &format!("block{b}.expand"))?;
        let e = g.relu(e)?;
        let r = conv(g, e, &format!("block{b}.restore"))?;
        feat = g.add(feat, r)?;
    }
    let inp = g.concat0(&[feat, d1])?;
    let res = conv(g, inp, "end")?;
    let disp = g.add(d1, res)?;
    let disp = g.reshape(disp, vec![h, w])?;

    let o = conv(g, x0, "occ0")?;
    let o = g.relu(o)?;
    let o = conv(g, o, "occ1")?;
    let o = g.sigmoid(o)?;
    let occ = g.reshape(o, vec![h, w])?;
    Ok((disp, occ))
}

/// Final full-resolution estimates and the intermediate raw maps.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityOutput<F> {
    pub disparity: Tensor<F>,
    pub occlusion: Tensor<F>,
    pub raw_disparity: Tensor<F>,
    pub raw_occlusion: Tensor<F>,
    pub raw: RawDisparityMap<F>,
}
