//! From per-pixel distributions to one point per character.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{page_tensor, CharacterVocabulary};
use crate::model::{KuroNet, ModelError, PositionList};
use crate::tensor::sigmoid;
use crate::training::Checkpoint;

/// Resolution at which `dbscan_eps` is expressed.
pub const EPS_REFERENCE_RESOLUTION: f64 = 640.0;
/// Lower bound on the scaled radius, so 8-connected pixels stay neighbours.
pub const MIN_EPS_PIXELS: f64 = 1.5;

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error("invalid inference config: {0}")]
    Config(String),
    #[error("checkpoint has not been trained (epoch 0)")]
    Untrained,
    #[error("checkpoint vocabulary has {vocab} tokens but the model predicts {model} classes")]
    Incompatible { vocab: usize, model: usize },
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = PostprocessError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub presence_threshold: f64,
    /// Neighbourhood radius in pixels at 640×640; scaled with the model resolution.
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            presence_threshold: 0.5,
            dbscan_eps: 3.0,
            dbscan_min_pts: 5,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.presence_threshold > 0.0 && self.presence_threshold < 1.0) {
            return Err(PostprocessError::Config(format!(
                "presence_threshold must lie in (0, 1), got {}",
                self.presence_threshold
            )));
        }
        if !(self.dbscan_eps > 0.0 && self.dbscan_eps.is_finite()) {
            return Err(PostprocessError::Config(format!(
                "dbscan_eps must be positive, got {}",
                self.dbscan_eps
            )));
        }
        if self.dbscan_min_pts == 0 {
            return Err(PostprocessError::Config("dbscan_min_pts must be at least 1".into()));
        }
        Ok(())
    }

    /// Radius in model pixels: `eps · R / 640`, never below [`MIN_EPS_PIXELS`].
    pub fn effective_eps(&self, resolution: usize) -> f64 {
        (self.dbscan_eps * resolution as f64 / EPS_REFERENCE_RESOLUTION).max(MIN_EPS_PIXELS)
    }
}

/// Cluster label of one point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Noise,
    Cluster(usize),
}

/// Uniform grid with cell side `eps` over the input points.
struct Grid {
    eps: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(points: &[(f64, f64)], eps: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, &p) in points.iter().enumerate() {
            cells.entry(Self::key(p, eps)).or_default().push(i);
        }
        Self { eps, cells }
    }

    fn key(p: (f64, f64), eps: f64) -> (i64, i64) {
        ((p.0 / eps).floor() as i64, (p.1 / eps).floor() as i64)
    }

    /// Indices within `eps` of point `i`, ascending, including `i` itself.
    fn neighbours(&self, points: &[(f64, f64)], i: usize) -> Vec<usize> {
        let p = points[i];
        let (kx, ky) = Self::key(p, self.eps);
        let eps2 = self.eps * self.eps;
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(cell) = self.cells.get(&(kx + dx, ky + dy)) {
                    out.extend(cell.iter().copied().filter(|&j| {
                        let q = points[j];
                        (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2) <= eps2
                    }));
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// DBSCAN over 2-D points with Euclidean distance.
///
/// A point is core when at least `min_pts` points (itself included) lie
/// within `eps`. Clusters are the connected components of core points,
/// numbered in order of their lowest-index core point. A non-core point
/// within `eps` of a core point joins the cluster of the lowest-index such
/// core point; every other point is noise.
pub fn dbscan(points: &[(f64, f64)], eps: f64, min_pts: usize) -> Vec<Label> {
    let n = points.len();
    let grid = Grid::new(points, eps);
    let neighbours: Vec<Vec<usize>> = (0..n).map(|i| grid.neighbours(points, i)).collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels = vec![Label::Noise; n];
    let mut next = 0;
    let mut stack = Vec::new();
    for seed in 0..n {
        if !core[seed] || labels[seed] != Label::Noise {
            continue;
        }
        let id = next;
        next += 1;
        labels[seed] = Label::Cluster(id);
        stack.push(seed);
        while let Some(i) = stack.pop() {
            for &j in &neighbours[i] {
                if core[j] && labels[j] == Label::Noise {
                    labels[j] = Label::Cluster(id);
                    stack.push(j);
                }
            }
        }
    }
    for i in 0..n {
        if !core[i] {
            if let Some(&c) = neighbours[i].iter().find(|&&j| core[j]) {
                labels[i] = labels[c];
            }
        }
    }
    labels
}

/// One recognised character.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub page_id: String,
    pub codepoint: String,
    /// Centre in original page pixels.
    pub x: f64,
    pub y: f64,
    /// Mean presence probability over the cluster.
    pub score: f64,
    /// Number of pixels in the cluster.
    pub support: usize,
}

/// Row-major `(row, col)` of every pixel with probability above `threshold`.
pub fn select_positions(probs: &[f64], resolution: usize, threshold: f64) -> Vec<(usize, usize)> {
    probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > threshold)
        .map(|(i, _)| (i / resolution, i % resolution))
        .collect()
}

/// Maps a mean model-grid position back to original page coordinates.
pub fn to_page_coordinates(row: f64, col: f64, resolution: usize, width: u32, height: u32) -> (f64, f64) {
    let r = resolution as f64;
    ((col + 0.5) * width as f64 / r, (row + 0.5) * height as f64 / r)
}

/// A trained model bundled with its vocabulary and inference settings.
#[derive(Debug, Clone)]
pub struct Recognizer {
    model: KuroNet<f32>,
    vocab: CharacterVocabulary,
    config: InferenceConfig,
}

impl Recognizer {
    pub fn new(model: KuroNet<f32>, vocab: CharacterVocabulary, config: InferenceConfig) -> Result<Self> {
        config.validate()?;
        if vocab.len() != model.num_classes() {
            return Err(PostprocessError::Incompatible {
                vocab: vocab.len(),
                model: model.num_classes(),
            });
        }
        Ok(Self { model, vocab, config })
    }

    /// Rejects checkpoints that were never trained.
    pub fn from_checkpoint(ckpt: Checkpoint, config: InferenceConfig) -> Result<Self> {
        if ckpt.epoch == 0 {
            return Err(PostprocessError::Untrained);
        }
        Self::new(ckpt.model, ckpt.vocab, config)
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.config
    }

    /// Presence probabilities at model resolution, row-major.
    pub fn presence_map(&self, image: &GrayImage) -> Result<Vec<f64>> {
        let r = self.model.resolution();
        let features = self.model.forward_features(&page_tensor(image, r))?;
        let p = sigmoid(&self.model.presence_logits(&features)?);
        Ok(p.data().iter().map(|&v| v as f64).collect())
    }

    pub fn predict_page(&self, page_id: &str, image: &GrayImage) -> Result<Vec<Prediction>> {
        let r = self.model.resolution();
        let x = page_tensor(image, r);
        let features = self.model.forward_features(&x)?;
        let probs: Vec<f64> = sigmoid(&self.model.presence_logits(&features)?)
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let selected = select_positions(&probs, r, self.config.presence_threshold);
        let points: Vec<(f64, f64)> = selected.iter().map(|&(a, b)| (a as f64, b as f64)).collect();
        let labels = dbscan(&points, self.config.effective_eps(r), self.config.dbscan_min_pts);

        let mut members: Vec<Vec<usize>> = Vec::new();
        for (i, l) in labels.iter().enumerate() {
            if let Label::Cluster(c) = *l {
                if members.len() <= c {
                    members.resize(c + 1, Vec::new());
                }
                members[c].push(i);
            }
        }
        // a cluster can lose border points to an earlier one; keep only full-size clusters
        members.retain(|m| m.len() >= self.config.dbscan_min_pts);
        let clustered: Vec<usize> = members.iter().flatten().copied().collect();
        let positions = PositionList::new(clustered.iter().map(|&i| selected[i]).collect(), r)?;
        let logits = self.model.character_logits_at(&features, &positions)?;
        let k = self.model.num_classes();
        let argmax: HashMap<usize, usize> = clustered
            .iter()
            .zip(logits.data().chunks(k))
            .map(|(&i, row)| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
                (i, best)
            })
            .collect();

        let (w0, h0) = image.dimensions();
        let preds = members
            .iter()
            .map(|m| {
                let mut votes = vec![0usize; k];
                for i in m {
                    votes[argmax[i]] += 1;
                }
                let class = votes
                    .iter()
                    .enumerate()
                    .fold(0, |b, (j, &v)| if v > votes[b] { j } else { b });
                let n = m.len() as f64;
                let row = m.iter().map(|&i| selected[i].0 as f64).sum::<f64>() / n;
                let col = m.iter().map(|&i| selected[i].1 as f64).sum::<f64>() / n;
                let (x, y) = to_page_coordinates(row, col, r, w0, h0);
                Prediction {
                    page_id: page_id.to_string(),
                    codepoint: self
                        .vocab
                        .token(class)
                        .expect("class below vocabulary size")
                        .to_string(),
                    x,
                    y,
                    score: m.iter().map(|&i| probs[selected[i].0 * r + selected[i].1]).sum::<f64>() / n,
                    support: m.len(),
                }
            })
            .collect();
        Ok(preds)
    }
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let io = |e: std::io::Error| PostprocessError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    for p in predictions {
        serde_json::to_writer(&mut w, p).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let io = |e: std::io::Error| PostprocessError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let reader = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PostprocessError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}
