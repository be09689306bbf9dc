use std::rc::Rc;

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Strided samples of one image row.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledLine<F> {
    /// Full-resolution x-coordinates `0, s, 2s, …`.
    pub coords: Vec<usize>,
    /// `[W_s, C_e]` descriptors at `coords`.
    pub descriptors: Tensor<F>,
}

/// Number of samples `ceil(n / s)`.
pub fn strided_len(n: usize, s: usize) -> usize {
    n.div_ceil(s)
}

fn check(w: usize, s: usize) -> Result<()> {
    if s == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    if s > 1 && s >= w {
        return Err(Error::Config(format!("stride {s} leaves a single sample on a {w}-wide line")));
    }
    Ok(())
}

struct SampleStride {
    s: usize,
    dims: [usize; 3],
}

impl SampleStride {
    /// Flat `(destination, source)` index pairs.
    fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let [c, h, w] = self.dims;
        let (hs, ws) = (strided_len(h, self.s), strided_len(w, self.s));
        (0..hs).flat_map(move |r| {
            (0..ws).flat_map(move |j| {
                (0..c).map(move |ch| ((r * ws + j) * c + ch, (ch * h + r * self.s) * w + j * self.s))
            })
        })
    }
}

impl<F: Scalar> CustomOp<F> for SampleStride {
    fn name(&self) -> &'static str {
        "sample_stride"
    }

    fn backward(&self, inputs: &[&Tensor<F>], _: &Tensor<F>, grad: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let mut gx = Tensor::zeros(inputs[0].shape().to_vec());
        for (dst, src) in self.pairs() {
            gx.data_mut()[src] = grad.data()[dst];
        }
        Ok(vec![Some(gx)])
    }
}

/// Samples a `[C, H, W]` feature map at rows and columns `0, s, 2s, …`,
/// producing lines `[H_s, W_s, C]`.
pub fn sample_stride<F: Scalar>(g: &mut Graph<'_, F>, fm: Var, s: usize) -> Result<Var> {
    let shape = g.shape(fm).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("sample_stride", format!("{shape:?}")));
    }
    check(shape[2], s)?;
    let op = SampleStride {
        s,
        dims: [shape[0], shape[1], shape[2]],
    };
    let (hs, ws) = (strided_len(shape[1], s), strided_len(shape[2], s));
    let src = g.value(fm).data();
    let mut out = vec![F::zero(); hs * ws * shape[0]];
    for (dst, si) in op.pairs() {
        out[dst] = src[si];
    }
    let v = Tensor::new(vec![hs, ws, shape[0]], out)?;
    g.custom(&[fm], v, Rc::new(op))
}

/// Tensor-level view of the same sampling, one [`SampledLine`] per sampled row.
pub fn sampled_lines<F: Scalar>(fm: &Tensor<F>, s: usize) -> Result<Vec<SampledLine<F>>> {
    if fm.rank() != 3 {
        return Err(Error::dim("sampled_lines", format!("{:?}", fm.shape())));
    }
    let (c, h, w) = (fm.shape()[0], fm.shape()[1], fm.shape()[2]);
    check(w, s)?;
    let coords: Vec<usize> = (0..strided_len(w, s)).map(|j| j * s).collect();
    (0..strided_len(h, s))
        .map(|r| {
            let mut d = Vec::with_capacity(coords.len() * c);
            for &x in &coords {
                for ch in 0..c {
                    d.push(fm.data()[(ch * h + r * s) * w + x]);
                }
            }
            Ok(SampledLine {
                coords: coords.clone(),
                descriptors: Tensor::new(vec![coords.len(), c], d)?,
            })
        })
        .collect()
}
