//! Convolutions expressed as a row gather (im2col) followed by one matmul, so
//! the only gradient paths are the already-verified gather and matmul ops.

use std::rc::Rc;

use super::{Graph, Result, TensorError, Var};

/// Geometry of a square-kernel convolution over an `[H, W, C]` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry { kernel, stride, padding }
    }

    /// Output extent `floor((n + 2p − k) / s) + 1`.
    pub fn conv_out(&self, n: usize) -> Result<usize> {
        let padded = n + 2 * self.padding;
        if self.stride == 0 || self.kernel == 0 || self.kernel > padded {
            return Err(TensorError::Geometry {
                op: "conv2d",
                detail: format!("kernel {} stride {} over padded extent {padded}", self.kernel, self.stride),
            });
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of the transposed convolution `(n − 1)s − 2p + k`.
    pub fn deconv_out(&self, n: usize) -> Result<usize> {
        let full = (n.max(1) - 1) * self.stride + self.kernel;
        if n == 0 || self.stride == 0 || self.kernel == 0 || self.padding >= self.kernel || 2 * self.padding >= full {
            return Err(TensorError::Geometry {
                op: "deconv2d",
                detail: format!("kernel {} stride {} padding {} on {n}", self.kernel, self.stride, self.padding),
            });
        }
        Ok(full - 2 * self.padding)
    }
}

fn im2col_index(h: usize, w: usize, oh: usize, ow: usize, geo: ConvGeometry, src: impl Fn(isize, isize) -> Option<usize>) -> Rc<[Option<usize>]> {
    let k = geo.kernel;
    let mut index = Vec::with_capacity(oh * ow * k * k);
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..k {
                for kx in 0..k {
                    let y = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    let x = (ox * geo.stride + kx) as isize - geo.padding as isize;
                    index.push(if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        src(y, x)
                    } else {
                        None
                    });
                }
            }
        }
    }
    index.into()
}

fn check_input(g: &Graph, op: &'static str, x: Var, kernel: Var, bias: Option<Var>, geo: ConvGeometry) -> Result<(usize, usize, usize, usize)> {
    let xs = g.shape(x);
    let ks = g.shape(kernel);
    if xs.len() != 3 || ks.len() != 2 || ks[0] != geo.kernel * geo.kernel * xs[2] {
        return Err(TensorError::Dimension {
            op,
            lhs: xs.to_vec(),
            rhs: ks.to_vec(),
        });
    }
    if let Some(b) = bias {
        if g.shape(b) != [ks[1]] {
            return Err(TensorError::Dimension {
                op,
                lhs: ks.to_vec(),
                rhs: g.shape(b).to_vec(),
            });
        }
    }
    Ok((xs[0], xs[1], xs[2], ks[1]))
}

fn finish(g: &mut Graph, cols: Var, kernel: Var, bias: Option<Var>, oh: usize, ow: usize, cout: usize) -> Result<Var> {
    let mut y = g.matmul(cols, kernel)?;
    if let Some(b) = bias {
        y = g.add_row(y, b)?;
    }
    g.reshape(y, vec![oh, ow, cout])
}

/// 2-D convolution of `x[H, W, Cin]` with `kernel[k·k·Cin, Cout]` (rows
/// ordered `(ky, kx, cin)`), zero padding.
pub fn conv2d(g: &mut Graph, x: Var, kernel: Var, bias: Option<Var>, geo: ConvGeometry) -> Result<Var> {
    let (h, w, cin, cout) = check_input(g, "conv2d", x, kernel, bias, geo)?;
    let (oh, ow) = (geo.conv_out(h)?, geo.conv_out(w)?);
    let index = im2col_index(h, w, oh, ow, geo, |y, x| Some(y as usize * w + x as usize));
    let k2 = geo.kernel * geo.kernel;
    let cols = g.gather_rows(x, cin, index, vec![oh * ow, k2 * cin])?;
    finish(g, cols, kernel, bias, oh, ow, cout)
}

/// Transposed convolution (fractional stride `1/s`): zero-dilate the input by
/// `s`, pad by `k − 1 − p`, then correlate with `kernel` at stride 1. Output
/// extent is `(n − 1)s − 2p + k`, so stride 2 with `k = 2, p = 0` doubles it.
pub fn deconv2d(g: &mut Graph, x: Var, kernel: Var, bias: Option<Var>, geo: ConvGeometry) -> Result<Var> {
    let (h, w, cin, cout) = check_input(g, "deconv2d", x, kernel, bias, geo)?;
    let (oh, ow) = (geo.deconv_out(h)?, geo.deconv_out(w)?);
    let s = geo.stride;
    let dh = (h - 1) * s + 1;
    let dw = (w - 1) * s + 1;
    let inner = ConvGeometry::new(geo.kernel, 1, geo.kernel - 1 - geo.padding);
    let index = im2col_index(dh, dw, oh, ow, inner, |y, x| {
        let (y, x) = (y as usize, x as usize);
        (y % s == 0 && x % s == 0).then(|| (y / s) * w + x / s)
    });
    let k2 = geo.kernel * geo.kernel;
    let cols = g.gather_rows(x, cin, index, vec![oh * ow, k2 * cin])?;
    finish(g, cols, kernel, bias, oh, ow, cout)
}
