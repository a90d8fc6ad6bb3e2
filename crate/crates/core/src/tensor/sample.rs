use super::{Tensor, Var};
use crate::error::{Error, Result};

/// Lower node, interpolation fraction, and whether the coordinate was
/// clamped, for a continuous node-index coordinate on an axis of `n` nodes.
#[inline]
fn cell(coord: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, true);
    }
    let max = (n - 1) as f64;
    let clamped = !(0.0..=max).contains(&coord);
    let c = coord.clamp(0.0, max);
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f64, clamped)
}

impl<'t> Var<'t> {
    /// Bilinear lookup in a `[c, h, w]` grid at node-index coordinates.
    ///
    /// `coords: [n, 2]` holds `(x, y)` = (column, row); coordinates outside
    /// `[0, w−1] × [0, h−1]` clamp to the border. Returns `[n, c]`.
    pub fn bilinear_sample_2d(self, coords: Var<'t>) -> Result<Var<'t>> {
        let (img, xy) = (self.value(), coords.value());
        let (is, cs) = (img.shape().to_vec(), xy.shape().to_vec());
        if is.len() != 3 || cs.len() != 2 || cs[1] != 2 {
            return Err(Error::shape("bilinear_sample_2d", &[&is, &cs]));
        }
        let (c, h, w) = (is[0], is[1], is[2]);
        let n = cs[0];
        let plane = h * w;
        let mut out = vec![0.0; n * c];
        for p in 0..n {
            let (x0, x1, fx, _) = cell(xy.data()[2 * p], w);
            let (y0, y1, fy, _) = cell(xy.data()[2 * p + 1], h);
            let w00 = (1.0 - fx) * (1.0 - fy);
            let w01 = fx * (1.0 - fy);
            let w10 = (1.0 - fx) * fy;
            let w11 = fx * fy;
            let (i00, i01, i10, i11) = (y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1);
            let row = &mut out[p * c..(p + 1) * c];
            for (ch, o) in row.iter_mut().enumerate() {
                let d = &img.data()[ch * plane..(ch + 1) * plane];
                *o = w00 * d[i00] + w01 * d[i01] + w10 * d[i10] + w11 * d[i11];
            }
        }
        let value = Tensor::from_parts(vec![n, c], out);
        Ok(self.tape.record(value, &[self, coords], move |g, needs| {
            let mut gimg = needs[0].then(|| vec![0.0; img.numel()]);
            let mut gxy = needs[1].then(|| vec![0.0; xy.numel()]);
            for p in 0..n {
                let (x0, x1, fx, cx) = cell(xy.data()[2 * p], w);
                let (y0, y1, fy, cy) = cell(xy.data()[2 * p + 1], h);
                let (i00, i01, i10, i11) = (y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1);
                let gp = &g[p * c..(p + 1) * c];
                if let Some(gi) = gimg.as_mut() {
                    let w00 = (1.0 - fx) * (1.0 - fy);
                    let w01 = fx * (1.0 - fy);
                    let w10 = (1.0 - fx) * fy;
                    let w11 = fx * fy;
                    for (ch, &gv) in gp.iter().enumerate() {
                        let d = &mut gi[ch * plane..(ch + 1) * plane];
                        d[i00] += w00 * gv;
                        d[i01] += w01 * gv;
                        d[i10] += w10 * gv;
                        d[i11] += w11 * gv;
                    }
                }
                if let Some(gc) = gxy.as_mut() {
                    let (mut dx, mut dy) = (0.0, 0.0);
                    for (ch, &gv) in gp.iter().enumerate() {
                        let d = &img.data()[ch * plane..(ch + 1) * plane];
                        dx += gv * ((1.0 - fy) * (d[i01] - d[i00]) + fy * (d[i11] - d[i10]));
                        dy += gv * ((1.0 - fx) * (d[i10] - d[i00]) + fx * (d[i11] - d[i01]));
                    }
                    if !cx {
                        gc[2 * p] = dx;
                    }
                    if !cy {
                        gc[2 * p + 1] = dy;
                    }
                }
            }
            vec![gimg, gxy]
        }))
    }

    /// Trilinear lookup in a `[c, d, h, w]` grid at node-index coordinates.
    ///
    /// `coords: [n, 3]` holds `(x, y, z)` indexing (width, height, depth);
    /// out-of-range coordinates clamp to the border. Returns `[n, c]`.
    pub fn trilinear_sample_3d(self, coords: Var<'t>) -> Result<Var<'t>> {
        let (vol, xyz) = (self.value(), coords.value());
        let (vs, cs) = (vol.shape().to_vec(), xyz.shape().to_vec());
        if vs.len() != 4 || cs.len() != 2 || cs[1] != 3 {
            return Err(Error::shape("trilinear_sample_3d", &[&vs, &cs]));
        }
        let (c, dd, h, w) = (vs[0], vs[1], vs[2], vs[3]);
        let n = cs[0];
        let block = dd * h * w;
        // (offset, weight) of the eight corners plus per-axis fractions.
        let corners = move |p: usize| {
            let (x0, x1, fx, cx) = cell(xyz.data()[3 * p], w);
            let (y0, y1, fy, cy) = cell(xyz.data()[3 * p + 1], h);
            let (z0, z1, fz, cz) = cell(xyz.data()[3 * p + 2], dd);
            let mut out = [(0usize, 0.0f64); 8];
            for (i, o) in out.iter_mut().enumerate() {
                let (xi, wx) = if i & 1 == 0 { (x0, 1.0 - fx) } else { (x1, fx) };
                let (yi, wy) = if i & 2 == 0 { (y0, 1.0 - fy) } else { (y1, fy) };
                let (zi, wz) = if i & 4 == 0 { (z0, 1.0 - fz) } else { (z1, fz) };
                *o = ((zi * h + yi) * w + xi, wx * wy * wz);
            }
            (out, [fx, fy, fz], [cx, cy, cz])
        };
        let mut out = vec![0.0; n * c];
        for p in 0..n {
            let (cr, _, _) = corners(p);
            for ch in 0..c {
                let d = &vol.data()[ch * block..(ch + 1) * block];
                out[p * c + ch] = cr.iter().map(|&(i, wt)| wt * d[i]).sum();
            }
        }
        let value = Tensor::from_parts(vec![n, c], out);
        let xyz = coords.value();
        Ok(self.tape.record(value, &[self, coords], move |g, needs| {
            let mut gvol = needs[0].then(|| vec![0.0; vol.numel()]);
            let mut gxyz = needs[1].then(|| vec![0.0; xyz.numel()]);
            for p in 0..n {
                let (cr, f, clamped) = corners(p);
                let gp = &g[p * c..(p + 1) * c];
                if let Some(gv) = gvol.as_mut() {
                    for (ch, &gval) in gp.iter().enumerate() {
                        let d = &mut gv[ch * block..(ch + 1) * block];
                        for &(i, wt) in &cr {
                            d[i] += wt * gval;
                        }
                    }
                }
                if let Some(gc) = gxyz.as_mut() {
                    for axis in 0..3 {
                        if clamped[axis] {
                            continue;
                        }
                        let bit = 1 << axis;
                        let mut acc = 0.0;
                        for (ch, &gval) in gp.iter().enumerate() {
                            let d = &vol.data()[ch * block..(ch + 1) * block];
                            for (k, &(i, _)) in cr.iter().enumerate() {
                                let sign = if k & bit == 0 { -1.0 } else { 1.0 };
                                let partial = other_factors(&corner_factors(f, k), axis);
                                acc += gval * sign * partial * d[i];
                            }
                        }
                        gc[3 * p + axis] = acc;
                    }
                }
            }
            vec![gvol, gxyz]
        }))
    }
}

/// Per-axis interpolation factors of corner `k`.
fn corner_factors(f: [f64; 3], k: usize) -> [f64; 3] {
    let mut out = [0.0; 3];
    for axis in 0..3 {
        out[axis] = if k & (1 << axis) == 0 { 1.0 - f[axis] } else { f[axis] };
    }
    out
}

/// Product of the factors other than `axis`.
fn other_factors(factors: &[f64; 3], axis: usize) -> f64 {
    (0..3).filter(|&a| a != axis).map(|a| factors[a]).product()
}
