//! Sinusoidal positional embeddings for scalars, boxes, box pairs and the
//! key grid of a feature map.
//!
//! A scalar `x` maps to `d` values laid out as interleaved
//! `[cos(x/f_1), sin(x/f_1), cos(x/f_2), sin(x/f_2), ...]` with
//! `f_i = tau^(2i/d)` for `i = 1..d/2`.
//!
//! Box embeddings used for cross-attention are `[y-block, x-block]`, and a key
//! cell at normalised centre `(x_c, y_c)` is embedded the same way, so the dot
//! product of a key and a box embedding is a sum of one vertical and one
//! horizontal similarity.

use crate::error::{Error, Result};
use crate::numcore::layers::{Activation, Init, Mlp2};
use crate::numcore::{Graph, NodeId, ParamStore, Tensor};

/// Smallest width/height used as a divisor in modulation.
pub const SIZE_FLOOR: f64 = 1e-4;

/// Box in centre format, normalised by image width and height.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxN {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxN {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// From pixel corners `[x1, y1, x2, y2]`, clamped to the image.
    pub fn from_pixels(b: [f64; 4], width: f64, height: f64) -> Self {
        let x1 = b[0].clamp(0.0, width);
        let x2 = b[2].clamp(0.0, width);
        let y1 = b[1].clamp(0.0, height);
        let y2 = b[3].clamp(0.0, height);
        Self {
            cx: (x1 + x2) / 2.0 / width,
            cy: (y1 + y2) / 2.0 / height,
            w: ((x2 - x1) / width).min(1.0),
            h: ((y2 - y1) / height).min(1.0),
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn x1(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    pub fn x2(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    pub fn y1(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    pub fn y2(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    /// Width and height floored at [`SIZE_FLOOR`], plus whether flooring happened.
    pub fn floored_size(&self) -> (f64, f64, bool) {
        let clamped = self.w < SIZE_FLOOR || self.h < SIZE_FLOOR;
        (self.w.max(SIZE_FLOOR), self.h.max(SIZE_FLOOR), clamped)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinusoidConfig {
    /// Dimension of one scalar embedding; must be even.
    pub d: usize,
    pub tau: f64,
}

impl Default for SinusoidConfig {
    fn default() -> Self {
        Self { d: 128, tau: 20.0 }
    }
}

impl SinusoidConfig {
    pub fn new(d: usize, tau: f64) -> Result<Self> {
        let cfg = Self { d, tau };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 2 != 0 {
            return Err(Error::Invalid(format!("sinusoid dimension {} must be even and positive", self.d)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Invalid(format!("temperature {} must be positive", self.tau)));
        }
        Ok(())
    }
}

/// Learned reference width and height, both inside `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefScales {
    pub w_ref: f64,
    pub h_ref: f64,
}

impl RefScales {
    pub const UNIT: RefScales = RefScales { w_ref: 1.0, h_ref: 1.0 };
}

fn write_sinusoid(x: f64, cfg: &SinusoidConfig, out: &mut [f64]) {
    let half = cfg.d / 2;
    for i in 1..=half {
        let f = cfg.tau.powf(2.0 * i as f64 / cfg.d as f64);
        let a = x / f;
        out[2 * (i - 1)] = a.cos();
        out[2 * (i - 1) + 1] = a.sin();
    }
}

/// Sinusoidal embedding of a scalar.
pub fn sinusoid(x: f64, cfg: &SinusoidConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !x.is_finite() {
        return Err(Error::Invalid("sinusoid of a non-finite value".into()));
    }
    let mut out = vec![0.0; cfg.d];
    write_sinusoid(x, cfg, &mut out);
    Ok(out)
}

/// `[phi(cx), phi(cy), phi(w), phi(h)]`, each block `d_model / 4` wide.
pub fn unary_box_pe(b: &BoxN, d_model: usize, tau: f64) -> Result<Vec<f64>> {
    if d_model % 4 != 0 || d_model == 0 {
        return Err(Error::Invalid(format!("d_model {d_model} must be a positive multiple of 4")));
    }
    let cfg = SinusoidConfig::new(d_model / 4, tau)?;
    let mut out = vec![0.0; d_model];
    for (k, v) in [b.cx, b.cy, b.w, b.h].into_iter().enumerate() {
        write_sinusoid(v, &cfg, &mut out[k * cfg.d..(k + 1) * cfg.d]);
    }
    Ok(out)
}

/// Unmodulated centre embedding `[phi(cy), phi(cx)]`.
pub fn standard_box_pe(b: &BoxN, cfg: &SinusoidConfig) -> Result<Vec<f64>> {
    modulated_box_pe(b, &RefScales::UNIT, cfg, false).map(|(v, _)| v)
}

/// `[phi(cy) * h_ref / h, phi(cx) * w_ref / w]` when `modulate`, otherwise the
/// unscaled blocks. The flag reports whether a side was floored.
pub fn modulated_box_pe(b: &BoxN, r: &RefScales, cfg: &SinusoidConfig, modulate: bool) -> Result<(Vec<f64>, bool)> {
    cfg.validate()?;
    let (w, h, clamped) = b.floored_size();
    let (sy, sx) = if modulate { (r.h_ref / h, r.w_ref / w) } else { (1.0, 1.0) };
    let d = cfg.d;
    let mut out = vec![0.0; 2 * d];
    write_sinusoid(b.cy, cfg, &mut out[..d]);
    write_sinusoid(b.cx, cfg, &mut out[d..]);
    out[..d].iter_mut().for_each(|v| *v *= sy);
    out[d..].iter_mut().for_each(|v| *v *= sx);
    Ok((out, modulate && clamped))
}

/// Box-pair embedding: human block first, then object block.
pub fn pair_pe(bh: &BoxN, bo: &BoxN, rh: &RefScales, ro: &RefScales, cfg: &SinusoidConfig) -> Result<Vec<f64>> {
    let (mut out, _) = modulated_box_pe(bh, rh, cfg, true)?;
    out.extend(modulated_box_pe(bo, ro, cfg, true)?.0);
    Ok(out)
}

/// Normalised centre of grid cell `(row, col)` as `(x, y)`.
pub fn cell_centre(row: usize, col: usize, h: usize, w: usize) -> (f64, f64) {
    ((col as f64 + 0.5) / w as f64, (row as f64 + 0.5) / h as f64)
}

/// Key embeddings `[H, W, 2d]`; cell `(r, c)` holds `[phi(y_c), phi(x_c)]` for
/// its normalised centre.
pub fn key_grid_pe(h: usize, w: usize, cfg: &SinusoidConfig) -> Result<Tensor> {
    cfg.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::Invalid(format!("empty key grid {h}x{w}")));
    }
    let d = cfg.d;
    let mut data = vec![0.0; h * w * 2 * d];
    for r in 0..h {
        for c in 0..w {
            let (x, y) = cell_centre(r, c, h, w);
            let off = (r * w + c) * 2 * d;
            write_sinusoid(y, cfg, &mut data[off..off + d]);
            write_sinusoid(x, cfg, &mut data[off + d..off + 2 * d]);
        }
    }
    Tensor::new(vec![h, w, 2 * d], data)
}

/// Two-layer MLP predicting `(w_ref, h_ref)` through a sigmoid.
#[derive(Clone, Debug)]
pub struct RefScaleHead {
    pub mlp: Mlp2,
}

impl RefScaleHead {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, act: Activation, init: &mut Init) -> Result<Self> {
        Ok(Self { mlp: Mlp2::new(store, name, d_model, d_model, 2, act, init)? })
    }

    /// `[n, 2]` node: column 0 is `w_ref`, column 1 is `h_ref`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: NodeId) -> Result<NodeId> {
        let z = self.mlp.forward(g, store, features)?;
        g.sigmoid(z)
    }

    pub fn ref_scales(&self, store: &ParamStore, feature: &[f64]) -> Result<RefScales> {
        let mut g = Graph::new();
        let f = g.constant(Tensor::row_vector(feature.to_vec()))?;
        let r = self.forward(&mut g, store, f)?;
        let v = g.value(r).data();
        Ok(RefScales { w_ref: v[0], h_ref: v[1] })
    }
}

/// Differentiable box embeddings for many boxes.
///
/// With `refs = Some([n, 2])` each box is modulated by its reference scales;
/// with `None` the standard centre embedding is produced. Returns the `[n, 2d]`
/// node and the number of boxes whose size was floored.
pub fn box_pe_graph(
    g: &mut Graph,
    boxes: &[BoxN],
    refs: Option<NodeId>,
    cfg: &SinusoidConfig,
) -> Result<(NodeId, usize)> {
    cfg.validate()?;
    let d = cfg.d;
    let n = boxes.len();
    let mut ys = vec![0.0; n * d];
    let mut xs = vec![0.0; n * d];
    let mut inv_h = vec![0.0; n];
    let mut inv_w = vec![0.0; n];
    let mut clamped = 0;
    for (k, b) in boxes.iter().enumerate() {
        write_sinusoid(b.cy, cfg, &mut ys[k * d..(k + 1) * d]);
        write_sinusoid(b.cx, cfg, &mut xs[k * d..(k + 1) * d]);
        let (w, h, c) = b.floored_size();
        inv_w[k] = 1.0 / w;
        inv_h[k] = 1.0 / h;
        clamped += c as usize;
    }
    let ys = g.constant(Tensor::new(vec![n, d], ys)?)?;
    let xs = g.constant(Tensor::new(vec![n, d], xs)?)?;
    let Some(refs) = refs else {
        return Ok((g.concat_cols(&[ys, xs])?, 0));
    };
    let w_ref = g.slice_cols(refs, 0, 1)?;
    let h_ref = g.slice_cols(refs, 1, 1)?;
    let inv_w = g.constant(Tensor::new(vec![n, 1], inv_w)?)?;
    let inv_h = g.constant(Tensor::new(vec![n, 1], inv_h)?)?;
    let sx = g.mul(w_ref, inv_w)?;
    let sy = g.mul(h_ref, inv_h)?;
    let ys = g.mul_col(ys, sy)?;
    let xs = g.mul_col(xs, sx)?;
    Ok((g.concat_cols(&[ys, xs])?, clamped))
}
