//! Direct 2-D convolution kernels (NCHW input, OCHW weights).

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Output positions `[lo, hi)` along one axis whose tap `k` lands inside
    /// an input of length `len`.
    #[inline]
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        // in = out * stride + k - pad must satisfy 0 <= in < len
        let s = self.stride as isize;
        let shift = k as isize - self.pad as isize;
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi_in = len as isize - 1 - shift;
        if hi_in < 0 {
            return (0, 0);
        }
        let hi = (hi_in / s + 1).min(out_len as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }
}

pub(crate) fn forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.o * g.ho * g.wo];
    let s = g.stride;
    for n in 0..g.n {
        for o in 0..g.o {
            let out_plane = &mut out[(n * g.o + o) * g.ho * g.wo..][..g.ho * g.wo];
            for c in 0..g.c {
                let in_plane = &input[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                for ki in 0..g.kh {
                    let (oy0, oy1) = g.valid_range(ki, g.h, g.ho);
                    for kj in 0..g.kw {
                        let wv = kernel[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = g.valid_range(kj, g.w, g.wo);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ki - g.pad;
                            let in_row = &in_plane[iy * g.w..][..g.w];
                            let out_row = &mut out_plane[oy * g.wo..][..g.wo];
                            for ox in ox0..ox1 {
                                out_row[ox] += wv * in_row[ox * s + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn backward_input(g: &ConvGeom, grad_out: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut gin = vec![0.0; g.n * g.c * g.h * g.w];
    let s = g.stride;
    for n in 0..g.n {
        for o in 0..g.o {
            let go_plane = &grad_out[(n * g.o + o) * g.ho * g.wo..][..g.ho * g.wo];
            for c in 0..g.c {
                let gi_plane = &mut gin[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                for ki in 0..g.kh {
                    let (oy0, oy1) = g.valid_range(ki, g.h, g.ho);
                    for kj in 0..g.kw {
                        let wv = kernel[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = g.valid_range(kj, g.w, g.wo);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ki - g.pad;
                            let go_row = &go_plane[oy * g.wo..][..g.wo];
                            let gi_row = &mut gi_plane[iy * g.w..][..g.w];
                            for ox in ox0..ox1 {
                                gi_row[ox * s + kj - g.pad] += wv * go_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

pub(crate) fn backward_kernel(g: &ConvGeom, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    let mut gk = vec![0.0; g.o * g.c * g.kh * g.kw];
    let s = g.stride;
    for n in 0..g.n {
        for o in 0..g.o {
            let go_plane = &grad_out[(n * g.o + o) * g.ho * g.wo..][..g.ho * g.wo];
            for c in 0..g.c {
                let in_plane = &input[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                for ki in 0..g.kh {
                    let (oy0, oy1) = g.valid_range(ki, g.h, g.ho);
                    for kj in 0..g.kw {
                        let (ox0, ox1) = g.valid_range(kj, g.w, g.wo);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ki - g.pad;
                            let go_row = &go_plane[oy * g.wo..][..g.wo];
                            let in_row = &in_plane[iy * g.w..][..g.w];
                            for ox in ox0..ox1 {
                                acc += go_row[ox] * in_row[ox * s + kj - g.pad];
                            }
                        }
                        gk[((o * g.c + c) * g.kh + ki) * g.kw + kj] += acc;
                    }
                }
            }
        }
    }
    gk
}
