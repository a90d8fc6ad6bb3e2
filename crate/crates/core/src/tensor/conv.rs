use super::linalg::{gemm, Mat};
use super::{Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        self.k / 2
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one `[cin, h, w]` image into `[cin·k·k, h·w]` patch columns.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (h, w, k, p) = (g.h as isize, g.w as isize, g.k, g.pad() as isize);
    for ci in 0..g.cin {
        let plane = &x[ci * g.hw()..(ci + 1) * g.hw()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * g.hw()..(row + 1) * g.hw()];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                let x_lo = (-dx).clamp(0, w) as usize;
                let x_hi = (w - dx).clamp(x_lo as isize, w) as usize;
                for (y, line) in dst.chunks_mut(g.w).enumerate() {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h {
                        line.fill(0.0);
                        continue;
                    }
                    line[..x_lo].fill(0.0);
                    line[x_hi..].fill(0.0);
                    let s0 = (sy * w + x_lo as isize + dx) as usize;
                    line[x_lo..x_hi].copy_from_slice(&plane[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch columns back onto an image.
fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (h, w, k, p) = (g.h as isize, g.w as isize, g.k, g.pad() as isize);
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.hw()..(ci + 1) * g.hw()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * g.hw()..(row + 1) * g.hw()];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                let x_lo = (-dx).max(0);
                let x_hi = (w - dx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let d0 = (y * w + x_lo) as usize;
                    let s0 = (sy * w + x_lo + dx) as usize;
                    let n = (x_hi - x_lo) as usize;
                    plane[s0..s0 + n]
                        .iter_mut()
                        .zip(&src[d0..d0 + n])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// Stride-1, zero-padded ("same") 2-D convolution with an odd kernel.
    ///
    /// `self: [n, cin, h, w]` or `[cin, h, w]`; `weight: [cout, cin, k, k]`;
    /// `bias: [cout]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let (x, wt) = (self.value(), weight.value());
        let (xs, ws) = (x.shape().to_vec(), wt.shape().to_vec());
        let batched = xs.len() == 4;
        let (batch, cin, h, w) = match xs.as_slice() {
            &[n, c, h, w] => (n, c, h, w),
            &[c, h, w] => (1, c, h, w),
            _ => return Err(Error::shape("conv2d", &[&xs, &ws])),
        };
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::shape("conv2d", &[&xs, &ws]));
        }
        let geom = ConvGeom {
            batch,
            cin,
            cout: ws[0],
            h,
            w,
            k: ws[2],
        };
        let bias_value = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [geom.cout] {
                    return Err(Error::shape("conv2d", &[&xs, &ws, bv.shape()]));
                }
                Some(bv)
            }
            None => None,
        };
        let hw = geom.hw();
        let mut out = vec![0.0; batch * geom.cout * hw];
        let mut cols = vec![0.0; if geom.k == 1 { 0 } else { geom.rows() * hw }];
        for b in 0..batch {
            let xb = &x.data()[b * cin * hw..(b + 1) * cin * hw];
            let colsb: &[f64] = if geom.k == 1 {
                xb
            } else {
                im2col(xb, &geom, &mut cols);
                &cols
            };
            let ob = &mut out[b * geom.cout * hw..(b + 1) * geom.cout * hw];
            if let Some(bv) = &bias_value {
                for (co, row) in ob.chunks_mut(hw).enumerate() {
                    row.iter_mut().for_each(|v| *v = bv.data()[co]);
                }
            }
            gemm(
                Mat::new(wt.data(), geom.cout, geom.rows()),
                Mat::new(colsb, geom.rows(), hw),
                1.0,
                ob,
            );
        }
        let out_shape = if batched {
            vec![batch, geom.cout, h, w]
        } else {
            vec![geom.cout, h, w]
        };
        let value = Tensor::from_parts(out_shape, out);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape.record(value, &parents, move |up, needs| {
            let geo = &geom;
            let hw = geo.hw();
            let mut gx = needs[0].then(|| vec![0.0; x.numel()]);
            let mut gw = needs[1].then(|| vec![0.0; wt.numel()]);
            let mut gb = needs.get(2).copied().unwrap_or(false).then(|| vec![0.0; geo.cout]);
            let mut cols = vec![0.0; if geo.k == 1 { 0 } else { geo.rows() * hw }];
            let mut dcols = vec![0.0; geo.rows() * hw];
            for b in 0..geo.batch {
                let gout = Mat::new(
                    &up[b * geo.cout * hw..(b + 1) * geo.cout * hw],
                    geo.cout,
                    hw,
                );
                if let Some(gb) = gb.as_mut() {
                    for (co, row) in gout.data.chunks(hw).enumerate() {
                        gb[co] += row.iter().sum::<f64>();
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    let xb = &x.data()[b * geo.cin * hw..(b + 1) * geo.cin * hw];
                    let colsb: &[f64] = if geo.k == 1 {
                        xb
                    } else {
                        im2col(xb, geo, &mut cols);
                        &cols
                    };
                    gemm(gout, Mat::new(colsb, geo.rows(), hw).t(), 1.0, gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let gxb = &mut gx[b * geo.cin * hw..(b + 1) * geo.cin * hw];
                    let wm = Mat::new(wt.data(), geo.cout, geo.rows()).t();
                    if geo.k == 1 {
                        gemm(wm, gout, 1.0, gxb);
                    } else {
                        gemm(wm, gout, 0.0, &mut dcols);
                        col2im(&dcols, geo, gxb);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if needs.len() > 2 {
                grads.push(gb);
            }
            grads
        }))
    }

    /// Nearest-neighbour ×2 upsampling of the last two axes.
    pub fn upsample_nearest2x(self) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("upsample_nearest2x", &[&shape]));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = x.numel() / (h * w).max(1);
        let mut out = Vec::with_capacity(x.numel() * 4);
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for row in src.chunks(w) {
                let wide: Vec<f64> = row.iter().flat_map(|&v| [v, v]).collect();
                out.extend_from_slice(&wide);
                out.extend_from_slice(&wide);
            }
        }
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = 2 * h;
        out_shape[r - 1] = 2 * w;
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.tape.record(value, &[self], move |g, _| {
            let mut gx = vec![0.0; planes * h * w];
            for p in 0..planes {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        gx[p * h * w + (y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// 2×2 average pooling of the last two axes (even extents required).
    pub fn avg_pool2x(self) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] % 2 != 0 || shape[shape.len() - 2] % 2 != 0 {
            return Err(Error::shape("avg_pool2x", &[&shape]));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let (ho, wo) = (h / 2, w / 2);
        let planes = x.numel() / (h * w).max(1);
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            for y in 0..h {
                for xx in 0..w {
                    out[(p * ho + y / 2) * wo + xx / 2] += 0.25 * x.data()[(p * h + y) * w + xx];
                }
            }
        }
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.tape.record(value, &[self], move |g, _| {
            let mut gx = vec![0.0; planes * h * w];
            for p in 0..planes {
                for y in 0..h {
                    for xx in 0..w {
                        gx[(p * h + y) * w + xx] = 0.25 * g[(p * ho + y / 2) * wo + xx / 2];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}
