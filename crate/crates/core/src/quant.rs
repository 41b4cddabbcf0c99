//! 8-bit weight-only quantization, symmetric per output column.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// int8 weights with one positive scale per output column.
/// dequant(q, scales) reproduces the source within scale_j / 2 per element.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix<T: Scalar> {
    q: Vec<i8>,
    scales: Vec<T>,
    d_in: usize,
    d_out: usize,
}

impl<T: Scalar> QuantizedMatrix<T> {
    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn q(&self) -> &[i8] {
        &self.q
    }

    pub fn scales(&self) -> &[T] {
        &self.scales
    }

    pub fn from_parts(q: Vec<i8>, scales: Vec<T>, d_in: usize, d_out: usize) -> Result<Self> {
        if q.len() != d_in * d_out || scales.len() != d_out {
            return Err(Error::ShapeMismatch(format!(
                "quantized matrix: {} values, {} scales for {d_in}x{d_out}",
                q.len(),
                scales.len()
            )));
        }
        Ok(QuantizedMatrix {
            q,
            scales,
            d_in,
            d_out,
        })
    }
}

/// Quantize `w` (d_in x d_out): scale_j = max|w[:,j]| / 127 (1 for all-zero
/// columns), q = round-half-away-from-zero(w / scale_j) clamped to [-127, 127].
pub fn quantize_woq<T: Scalar>(w: &Tensor<T>) -> Result<QuantizedMatrix<T>> {
    if !w.all_finite() {
        return Err(Error::NonFinite("quantize_woq input"));
    }
    let (d_in, d_out) = (w.rows(), w.cols());
    let mut scales = vec![T::ONE; d_out];
    for j in 0..d_out {
        let mut maxabs = 0.0f64;
        for i in 0..d_in {
            maxabs = maxabs.max(w.at(i, j).abs().to_f64());
        }
        if maxabs > 0.0 {
            scales[j] = T::from_f64(maxabs / 127.0);
        }
    }
    let mut q = vec![0i8; d_in * d_out];
    for i in 0..d_in {
        for j in 0..d_out {
            // f64::round is round-half-away-from-zero
            let v = (w.at(i, j).to_f64() / scales[j].to_f64()).round();
            q[i * d_out + j] = v.clamp(-127.0, 127.0) as i8;
        }
    }
    QuantizedMatrix::from_parts(q, scales, d_in, d_out)
}

/// Reconstruct the float matrix: q[i][j] * scale_j.
pub fn dequantize<T: Scalar>(m: &QuantizedMatrix<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(&[m.d_in, m.d_out]);
    for i in 0..m.d_in {
        let row = out.row_mut(i);
        for j in 0..m.d_out {
            row[j] = T::from_f64(m.q[i * m.d_out + j] as f64) * m.scales[j];
        }
    }
    out
}

/// x[n x d_in] * dequant(m), computed in float without materializing the
/// dequantized matrix.
pub fn matmul_quant<T: Scalar>(x: &Tensor<T>, m: &QuantizedMatrix<T>) -> Result<Tensor<T>> {
    if x.cols() != m.d_in {
        return Err(Error::ShapeMismatch(format!(
            "matmul_quant: {:?} x {}x{}",
            x.shape(),
            m.d_in,
            m.d_out
        )));
    }
    let n = x.rows();
    let mut out = Tensor::zeros(&[n, m.d_out]);
    for i in 0..n {
        let xrow = x.row(i);
        let orow = out.row_mut(i);
        for (k, &xv) in xrow.iter().enumerate() {
            let qrow = &m.q[k * m.d_out..(k + 1) * m.d_out];
            for (o, &qv) in orow.iter_mut().zip(qrow) {
                *o += xv * T::from_f64(qv as f64);
            }
        }
        for (o, &s) in orow.iter_mut().zip(&m.scales) {
            *o = *o * s;
        }
    }
    Ok(out)
}
