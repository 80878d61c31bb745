//! Binary PGM (P5) and PPM (P6) heatmaps. The min/max used for the 8-bit
//! mapping are stored as comment lines so values can be recovered.

use pvic::numcore::Tensor;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub enum Pixels {
    Gray(Vec<u8>),
    Rgb(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Pixels,
    pub min: f64,
    pub max: f64,
    /// Extra `key value` comment lines.
    pub notes: Vec<(String, String)>,
}

fn to_u8(v: f64, min: f64, max: f64) -> u8 {
    if max > min {
        (255.0 * (v - min) / (max - min)).round().clamp(0.0, 255.0) as u8
    } else {
        0
    }
}

fn range(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

impl HeatmapImage {
    /// Grayscale image of a `[H, W]` map after min-max normalisation.
    pub fn gray(map: &Tensor) -> Result<Self, CliError> {
        let [h, w] = map.shape() else {
            return Err(CliError::Config(format!("heatmap needs a [H, W] map, got {:?}", map.shape())));
        };
        let (min, max) = range(map.data());
        let pixels = map.data().iter().map(|&v| to_u8(v, min, max)).collect();
        Ok(Self { width: *w, height: *h, pixels: Pixels::Gray(pixels), min, max, notes: Vec::new() })
    }

    /// RGB overlay: `background` in gray with `attention` blended in red, both
    /// `[H, W]`, each cell drawn as a `scale x scale` block. `outlines` are
    /// `(x1, y1, x2, y2)` rectangles in normalised coordinates with a colour.
    pub fn overlay(background: &Tensor, attention: &Tensor, scale: usize, outlines: &[([f64; 4], [u8; 3])]) -> Result<Self, CliError> {
        let [h, w] = background.shape() else {
            return Err(CliError::Config("overlay background must be [H, W]".into()));
        };
        if attention.shape() != background.shape() || scale == 0 {
            return Err(CliError::Config("overlay maps must share a shape and scale must be positive".into()));
        }
        let (h, w) = (*h, *w);
        let (bmin, bmax) = range(background.data());
        let (min, max) = range(attention.data());
        let (ow, oh) = (w * scale, h * scale);
        let mut px = vec![0u8; ow * oh * 3];
        for y in 0..oh {
            for x in 0..ow {
                let i = (y / scale) * w + x / scale;
                let g = to_u8(background.data()[i], bmin, bmax) as f64 * 0.6;
                let a = to_u8(attention.data()[i], min, max) as f64 / 255.0;
                let o = (y * ow + x) * 3;
                px[o] = (g * (1.0 - a) + 255.0 * a).round() as u8;
                px[o + 1] = (g * (1.0 - a)).round() as u8;
                px[o + 2] = (g * (1.0 - a)).round() as u8;
            }
        }
        for (b, colour) in outlines {
            let fx = |v: f64| ((v * ow as f64).round() as isize).clamp(0, ow as isize - 1) as usize;
            let fy = |v: f64| ((v * oh as f64).round() as isize).clamp(0, oh as isize - 1) as usize;
            let (x1, y1, x2, y2) = (fx(b[0]), fy(b[1]), fx(b[2]), fy(b[3]));
            let mut put = |x: usize, y: usize| px[(y * ow + x) * 3..(y * ow + x) * 3 + 3].copy_from_slice(colour);
            for x in x1..=x2 {
                put(x, y1);
                put(x, y2);
            }
            for y in y1..=y2 {
                put(x1, y);
                put(x2, y);
            }
        }
        Ok(Self { width: ow, height: oh, pixels: Pixels::Rgb(px), min, max, notes: Vec::new() })
    }

    pub fn with_note(mut self, key: &str, value: impl ToString) -> Self {
        self.notes.push((key.to_string(), value.to_string()));
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (magic, data) = match &self.pixels {
            Pixels::Gray(p) => ("P5", p),
            Pixels::Rgb(p) => ("P6", p),
        };
        let mut head = format!("{magic}\n# min {:e}\n# max {:e}\n", self.min, self.max);
        for (k, v) in &self.notes {
            head += &format!("# {k} {v}\n");
        }
        head += &format!("{} {}\n255\n", self.width, self.height);
        let mut out = head.into_bytes();
        out.extend_from_slice(data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let bad = |m: &str| CliError::Io(format!("heatmap: {m}"));
        let mut pos = 0;
        let mut line = || -> Result<String, CliError> {
            let end = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
            let s = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not text"))?.to_string();
            pos += end + 1;
            Ok(s)
        };
        let magic = line()?;
        let (mut min, mut max, mut notes) = (f64::NAN, f64::NAN, Vec::new());
        let dims = loop {
            let l = line()?;
            match l.strip_prefix("# ") {
                Some(c) => {
                    let (k, v) = c.split_once(' ').unwrap_or((c, ""));
                    match k {
                        "min" => min = v.parse().map_err(|_| bad("bad min"))?,
                        "max" => max = v.parse().map_err(|_| bad("bad max"))?,
                        _ => notes.push((k.to_string(), v.to_string())),
                    }
                }
                None => break l,
            }
        };
        let (w, h) = dims.split_once(' ').ok_or_else(|| bad("bad size line"))?;
        let (width, height): (usize, usize) = (w.parse().map_err(|_| bad("bad width"))?, h.parse().map_err(|_| bad("bad height"))?);
        if line()? != "255" {
            return Err(bad("max value must be 255"));
        }
        let data = bytes[pos..].to_vec();
        let channels = if magic == "P5" { 1 } else if magic == "P6" { 3 } else { return Err(bad("unknown magic")) };
        if data.len() != width * height * channels {
            return Err(bad("pixel count does not match size"));
        }
        let pixels = if channels == 1 { Pixels::Gray(data) } else { Pixels::Rgb(data) };
        Ok(Self { width, height, pixels, min, max, notes })
    }

    /// Values recovered from an 8-bit grayscale image via the stored range.
    pub fn recover(&self) -> Option<Vec<f64>> {
        match &self.pixels {
            Pixels::Gray(p) => Some(p.iter().map(|&b| self.min + (self.max - self.min) * b as f64 / 255.0).collect()),
            Pixels::Rgb(_) => None,
        }
    }
}
