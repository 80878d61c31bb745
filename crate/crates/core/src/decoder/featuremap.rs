use std::io::{Read, Write};

use crate::error::{format_err, Error, Result};
use crate::numcore::{Cursor, Tensor};

pub const PVFM_MAGIC: &[u8; 4] = b"PVFM";
pub const PVFM_VERSION: u32 = 1;

/// Dense `C x H x W` feature grid used as cross-attention keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Tensor,
    stride: u32,
}

impl FeatureMap {
    pub fn new(data: Tensor, stride: u32) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s.iter().any(|&e| e == 0) {
            return Err(Error::Invalid(format!("feature map must be non-empty C x H x W, got {s:?}")));
        }
        if stride == 0 {
            return Err(Error::Invalid("feature map stride must be positive".into()));
        }
        Ok(Self { data, stride })
    }

    /// Builds a map from `[H*W, C]` cell-major tokens.
    pub fn from_tokens(tokens: &Tensor, h: usize, w: usize, stride: u32) -> Result<Self> {
        let c = tokens.cols();
        if tokens.rows() != h * w {
            return Err(Error::Invalid(format!("{} tokens for a {h}x{w} map", tokens.rows())));
        }
        let mut data = vec![0.0; c * h * w];
        for cell in 0..h * w {
            for (ch, v) in tokens.row(cell).iter().enumerate() {
                data[ch * h * w + cell] = *v;
            }
        }
        Self::new(Tensor::new(vec![c, h, w], data)?, stride)
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }
    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }
    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
    pub fn stride(&self) -> u32 {
        self.stride
    }
    pub fn cells(&self) -> usize {
        self.height() * self.width()
    }

    /// Image size in pixels implied by the grid and stride, `(width, height)`.
    pub fn image_size(&self) -> (f64, f64) {
        ((self.width() as u32 * self.stride) as f64, (self.height() as u32 * self.stride) as f64)
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn get(&self, ch: usize, row: usize, col: usize) -> f64 {
        self.data.data()[(ch * self.height() + row) * self.width() + col]
    }

    /// `[H*W, C]` matrix, one row per cell in row-major cell order.
    pub fn tokens(&self) -> Tensor {
        let (c, n) = (self.channels(), self.cells());
        let src = self.data.data();
        let mut out = vec![0.0; n * c];
        for ch in 0..c {
            for cell in 0..n {
                out[cell * c + ch] = src[ch * n + cell];
            }
        }
        Tensor::new(vec![n, c], out).expect("token shape")
    }

    /// Bilinear sample at a normalised point, cell centres at `(k + 0.5) / extent`.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Vec<f64> {
        let (h, w) = (self.height(), self.width());
        let u = (x * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let v = (y * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let (c0, r0) = (u.floor() as usize, v.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(w - 1), (r0 + 1).min(h - 1));
        let (fu, fv) = (u - c0 as f64, v - r0 as f64);
        (0..self.channels())
            .map(|ch| {
                let top = self.get(ch, r0, c0) * (1.0 - fu) + self.get(ch, r0, c1) * fu;
                let bot = self.get(ch, r1, c0) * (1.0 - fu) + self.get(ch, r1, c1) * fu;
                top * (1.0 - fv) + bot * fv
            })
            .collect()
    }

    /// Sets every channel of the listed cells (row-major indices) to zero.
    pub fn zero_cells(&mut self, cells: &[usize]) {
        let n = self.cells();
        let c = self.channels();
        let data = self.data.data_mut();
        for &cell in cells {
            for ch in 0..c {
                data[ch * n + cell] = 0.0;
            }
        }
    }

    /// Rounds every value to the nearest f32 so the map survives a file round trip.
    pub fn round_to_f32(&mut self) {
        for v in self.data.data_mut() {
            *v = *v as f32 as f64;
        }
    }

    /// `b"PVFM"`, version, `C, H, W, stride` as u32 LE, then f32 LE payload in C-major order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PVFM_MAGIC)?;
        w.write_all(&PVFM_VERSION.to_le_bytes())?;
        for v in [self.channels() as u32, self.height() as u32, self.width() as u32, self.stride] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in self.data.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = Cursor { buf: &buf, pos: 0 };
        if cur.take(4)? != PVFM_MAGIC {
            return Err(format_err("feature map", "bad magic"));
        }
        let version = cur.u32()?;
        if version != PVFM_VERSION {
            return Err(format_err("feature map", format!("unsupported version {version}")));
        }
        let (c, h, w, stride) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize, cur.u32()?);
        let n = c * h * w;
        let data = cur
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        if cur.pos != buf.len() {
            return Err(format_err("feature map", "trailing bytes"));
        }
        Self::new(Tensor::new(vec![c, h, w], data)?, stride)
    }
}
