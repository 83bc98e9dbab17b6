// Raw slice kernels shared by the forward and backward passes.

/// `out += a[m,k] · b[k,n]`
pub(crate) fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a[m,k] · b[n,k]ᵀ`
pub(crate) fn mm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// `out += a[k,m]ᵀ · b[k,n]`
pub(crate) fn mm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncol = g.cols();
    let mut cols = vec![0.0; g.rows() * ncol];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[r * ncol..(r + 1) * ncol];
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im_acc(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncol = g.cols();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[r * ncol..(r + 1) * ncol];
                for oy in 0..g.ho {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Source indices and weights for resizing one axis with half-pixel
/// centres (`align_corners = false`).
pub(crate) fn bilinear_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub(crate) struct Resize {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
    pub ys: Vec<(usize, usize, f64)>,
    pub xs: Vec<(usize, usize, f64)>,
}

impl Resize {
    pub fn new(planes: usize, h: usize, w: usize, ho: usize, wo: usize) -> Self {
        Resize {
            planes,
            h,
            w,
            ho,
            wo,
            ys: bilinear_axis(h, ho),
            xs: bilinear_axis(w, wo),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.planes * self.ho * self.wo];
        for p in 0..self.planes {
            let src = &x[p * self.h * self.w..][..self.h * self.w];
            let dst = &mut out[p * self.ho * self.wo..][..self.ho * self.wo];
            for (oy, &(y0, y1, fy)) in self.ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.xs.iter().enumerate() {
                    let top = src[y0 * self.w + x0] * (1.0 - fx) + src[y0 * self.w + x1] * fx;
                    let bot = src[y1 * self.w + x0] * (1.0 - fx) + src[y1 * self.w + x1] * fx;
                    dst[oy * self.wo + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        out
    }

    pub fn backward_acc(&self, dy: &[f64], dx: &mut [f64]) {
        for p in 0..self.planes {
            let src = &dy[p * self.ho * self.wo..][..self.ho * self.wo];
            let dst = &mut dx[p * self.h * self.w..][..self.h * self.w];
            for (oy, &(y0, y1, fy)) in self.ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.xs.iter().enumerate() {
                    let g = src[oy * self.wo + ox];
                    dst[y0 * self.w + x0] += g * (1.0 - fy) * (1.0 - fx);
                    dst[y0 * self.w + x1] += g * (1.0 - fy) * fx;
                    dst[y1 * self.w + x0] += g * fy * (1.0 - fx);
                    dst[y1 * self.w + x1] += g * fy * fx;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Pool {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Pool {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let norm = 1.0 / (self.kh * self.kw) as f64;
        let mut out = vec![0.0; self.planes * self.ho * self.wo];
        for p in 0..self.planes {
            let src = &x[p * self.h * self.w..][..self.h * self.w];
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let mut acc = 0.0;
                    for ki in 0..self.kh {
                        let row = &src[(oy * self.sh + ki) * self.w + ox * self.sw..][..self.kw];
                        acc += row.iter().sum::<f64>();
                    }
                    out[(p * self.ho + oy) * self.wo + ox] = acc * norm;
                }
            }
        }
        out
    }

    pub fn backward_acc(&self, dy: &[f64], dx: &mut [f64]) {
        let norm = 1.0 / (self.kh * self.kw) as f64;
        for p in 0..self.planes {
            let dst = &mut dx[p * self.h * self.w..][..self.h * self.w];
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let g = dy[(p * self.ho + oy) * self.wo + ox] * norm;
                    for ki in 0..self.kh {
                        let row = &mut dst[(oy * self.sh + ki) * self.w + ox * self.sw..][..self.kw];
                        for v in row {
                            *v += g;
                        }
                    }
                }
            }
        }
    }
}

/// Rectangular windows cut out of a `[C, H, W]` map.
#[derive(Clone, Debug)]
pub(crate) struct Windows {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub wh: usize,
    pub ww: usize,
    pub origins: Vec<(usize, usize)>,
}

impl Windows {
    pub fn gather(&self, x: &[f64]) -> Vec<f64> {
        let per = self.channels * self.wh * self.ww;
        let mut out = vec![0.0; self.origins.len() * per];
        for (n, &(y0, x0)) in self.origins.iter().enumerate() {
            for c in 0..self.channels {
                for i in 0..self.wh {
                    let src = &x[(c * self.h + y0 + i) * self.w + x0..][..self.ww];
                    let dst = &mut out[n * per + (c * self.wh + i) * self.ww..][..self.ww];
                    dst.copy_from_slice(src);
                }
            }
        }
        out
    }

    pub fn scatter_acc(&self, win: &[f64], x: &mut [f64]) {
        let per = self.channels * self.wh * self.ww;
        for (n, &(y0, x0)) in self.origins.iter().enumerate() {
            for c in 0..self.channels {
                for i in 0..self.wh {
                    let src = &win[n * per + (c * self.wh + i) * self.ww..][..self.ww];
                    let dst = &mut x[(c * self.h + y0 + i) * self.w + x0..][..self.ww];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `(outer, axis, inner)` extents for an operation along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
