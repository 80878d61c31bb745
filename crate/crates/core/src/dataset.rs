//! In-memory samples and the on-disk dataset layout.
//!
//! ```text
//! <root>/action_table.txt
//! <root>/rare_split.txt
//! <root>/<split>/detections.jsonl
//! <root>/<split>/gt.jsonl
//! <root>/<split>/features/<image_id>.pvfm
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::FeatureMap;
use crate::error::{format_err, Error, Result};
use crate::eval::{read_gt, ClassSplit, GtPair, PixelBox};
use crate::objective::ActionTable;

/// First-stage detections of one image, as stored in the detections file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub boxes: Vec<PixelBox>,
    pub scores: Vec<f64>,
    pub classes: Vec<usize>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.len() || self.classes.len() != self.len() {
            return Err(format_err("detections", format!("{}: field lengths differ", self.image_id)));
        }
        if let Some(s) = self.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(format_err("detections", format!("{}: score {s} outside [0, 1]", self.image_id)));
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(format_err("detections", format!("{}: bad image size", self.image_id)));
        }
        Ok(())
    }
}

/// Everything the model and the evaluator need for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub detections: DetectionSet,
    pub gt: Vec<GtPair>,
    pub features: FeatureMap,
}

impl Sample {
    pub fn image_id(&self) -> &str {
        &self.detections.image_id
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub table: ActionTable,
    pub split: ClassSplit,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn write_detections<W: Write>(mut w: W, sets: &[DetectionSet]) -> Result<()> {
    for s in sets {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_detections<R: BufRead>(r: R) -> Result<Vec<DetectionSet>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let set: DetectionSet =
            serde_json::from_str(&line).map_err(|e| format_err("detections", format!("line {}: {e}", n + 1)))?;
        set.validate()?;
        out.push(set);
    }
    Ok(out)
}

pub fn features_path(root: &Path, split: &str, image_id: &str) -> PathBuf {
    root.join(split).join("features").join(format!("{image_id}.pvfm"))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Loads one split: detections, ground truth and every referenced feature map.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<Sample>> {
    let dets = read_detections(open(&root.join(split).join("detections.jsonl"))?)?;
    let gts = read_gt(open(&root.join(split).join("gt.jsonl"))?)?;
    let mut samples = Vec::with_capacity(dets.len());
    for d in dets {
        let features = FeatureMap::read_from(open(&features_path(root, split, &d.image_id))?)?;
        let gt = gts.iter().filter(|g| g.image_id == d.image_id).cloned().collect();
        samples.push(Sample { detections: d, gt, features });
    }
    Ok(samples)
}

pub fn load_table(root: &Path, n_actions: usize) -> Result<ActionTable> {
    ActionTable::parse(&std::fs::read_to_string(root.join("action_table.txt"))?, n_actions)
}

pub fn load_split_file(root: &Path) -> Result<ClassSplit> {
    ClassSplit::parse(&std::fs::read_to_string(root.join("rare_split.txt"))?)
}

/// Loads a full dataset written by the synthetic generator (or laid out the same way).
pub fn load_dataset(root: &Path, n_actions: usize) -> Result<Dataset> {
    Ok(Dataset {
        table: load_table(root, n_actions)?,
        split: load_split_file(root)?,
        train: load_split(root, "train")?,
        test: load_split(root, "test")?,
    })
}
