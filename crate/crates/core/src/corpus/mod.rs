//! Labelled page corpora.
//!
//! A book lives in a directory with one 8-bit grayscale PNG per page under
//! `images/` and a single `coordinates.csv` listing every labelled character
//! box as `page_id,codepoint,x,y,width,height` in original pixel units.

mod raster;
pub mod synth;
mod vocab;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Scalar, Tensor};

pub use raster::{rasterize_labels, LabelMaps};
pub use vocab::{CharacterVocabulary, OTHER_TOKEN};

pub const CSV_HEADER: [&str; 6] = ["page_id", "codepoint", "x", "y", "width", "height"];
pub const CSV_NAME: &str = "coordinates.csv";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Csv { path: PathBuf, line: u64, reason: String },
    #[error("page {page_id}: image file missing at {path}")]
    MissingImage { page_id: String, path: PathBuf },
    #[error("{path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("no labelled characters in the training pages")]
    NoLabels,
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("invalid synthetic corpus spec: {0}")]
    Synth(String),
    #[error("invalid resolution {0}: must be a positive multiple of 16")]
    Resolution(usize),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One labelled character: class token plus its box in original pixels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CharacterBox {
    pub codepoint: String,
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl CharacterBox {
    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.width as f64 / 2.0,
            self.y as f64 + self.height as f64 / 2.0,
        )
    }

    /// Whether the point lies inside the box (left/top edges inclusive).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x as f64
            && x < (self.x + self.width) as f64
            && y >= self.y as f64
            && y < (self.y + self.height) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageSample {
    pub page_id: String,
    pub book_id: String,
    pub image: GrayImage,
    pub boxes: Vec<CharacterBox>,
}

impl PageSample {
    /// Pages without any labelled character are left out of training and evaluation.
    pub fn is_excluded(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.image.dimensions()
    }
}

/// Resamples a page to `[1, 1, r, r]` with values in `[0, 1]`.
pub fn page_tensor<T: Scalar>(image: &GrayImage, r: usize) -> Tensor<T> {
    let float: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_fn(image.width(), image.height(), |x, y| {
        Luma([image.get_pixel(x, y)[0] as f32 / 255.0])
    });
    let resized = if (image.width() as usize, image.height() as usize) == (r, r) {
        float
    } else {
        imageops::resize(&float, r as u32, r as u32, FilterType::Triangle)
    };
    Tensor::from_fn(&[1, 1, r, r], |i| T::of(resized.as_raw()[i].clamp(0.0, 1.0) as f64))
}

/// Reads a `coordinates.csv` into per-page box lists (file order preserved).
pub fn read_coordinates(path: &Path) -> Result<BTreeMap<String, Vec<CharacterBox>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, 1, e))?;
    let header = reader.headers().map_err(|e| csv_err(path, 1, e))?.clone();
    if header.iter().map(str::trim).ne(CSV_HEADER) {
        return Err(CorpusError::Csv {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("expected header {}, found {:?}", CSV_HEADER.join(","), header),
        });
    }
    let mut out: BTreeMap<String, Vec<CharacterBox>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(path, line, e)
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |reason: String| CorpusError::Csv {
            path: path.to_path_buf(),
            line,
            reason,
        };
        if record.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", record.len())));
        }
        let num = |i: usize| -> Result<u32> {
            record[i]
                .trim()
                .parse::<u32>()
                .map_err(|e| bad(format!("field {} ({:?}): {e}", CSV_HEADER[i], &record[i])))
        };
        let b = CharacterBox {
            codepoint: record[1].trim().to_string(),
            x: num(2)?,
            y: num(3)?,
            width: num(4)?,
            height: num(5)?,
        };
        if b.width == 0 || b.height == 0 {
            return Err(bad("box width and height must be positive".into()));
        }
        if b.codepoint.is_empty() {
            return Err(bad("empty codepoint".into()));
        }
        out.entry(record[0].trim().to_string()).or_default().push(b);
    }
    Ok(out)
}

fn csv_err(path: &Path, line: u64, e: csv::Error) -> CorpusError {
    CorpusError::Csv {
        path: path.to_path_buf(),
        line,
        reason: e.to_string(),
    }
}

pub fn write_coordinates(path: &Path, pages: &[PageSample]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_err(path, 0, e))?;
    w.write_record(CSV_HEADER).map_err(|e| csv_err(path, 0, e))?;
    for page in pages {
        for b in &page.boxes {
            w.write_record([
                page.page_id.as_str(),
                b.codepoint.as_str(),
                &b.x.to_string(),
                &b.y.to_string(),
                &b.width.to_string(),
                &b.height.to_string(),
            ])
            .map_err(|e| csv_err(path, 0, e))?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// Loads every page of a book directory, sorted by page id.
///
/// Pages that have an image but no CSV rows come back with an empty box
/// list (see [`PageSample::is_excluded`]); CSV rows naming a page without
/// an image are an error.
pub fn load_book(dir: &Path) -> Result<Vec<PageSample>> {
    let book_id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut boxes = read_coordinates(&dir.join(CSV_NAME))?;
    let image_dir = dir.join(IMAGE_DIR);
    let mut ids = Vec::new();
    for entry in fs::read_dir(&image_dir).map_err(io_err(&image_dir))? {
        let path = entry.map_err(io_err(&image_dir))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    if let Some(orphan) = boxes.keys().find(|k| ids.binary_search(k).is_err()) {
        return Err(CorpusError::MissingImage {
            page_id: orphan.clone(),
            path: image_dir.join(format!("{orphan}.png")),
        });
    }
    let mut pages = Vec::with_capacity(ids.len());
    for page_id in ids {
        let path = image_dir.join(format!("{page_id}.png"));
        let image = read_gray(&path)?;
        let page_boxes = boxes.remove(&page_id).unwrap_or_default();
        let (w, h) = image.dimensions();
        if let Some(b) = page_boxes.iter().find(|b| b.x + b.width > w || b.y + b.height > h) {
            return Err(CorpusError::Csv {
                path: dir.join(CSV_NAME),
                line: 0,
                reason: format!("page {page_id}: box {b:?} exceeds the {w}x{h} image"),
            });
        }
        pages.push(PageSample {
            page_id,
            book_id: book_id.clone(),
            image,
            boxes: page_boxes,
        });
    }
    Ok(pages)
}

/// Writes pages in the layout [`load_book`] reads.
pub fn save_book(dir: &Path, pages: &[PageSample]) -> Result<()> {
    let image_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(io_err(&image_dir))?;
    for page in pages {
        let path = image_dir.join(format!("{}.png", page.page_id));
        page.image.save(&path).map_err(|e| CorpusError::Image {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    }
    write_coordinates(&dir.join(CSV_NAME), pages)
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| CorpusError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(img.into_luma8())
}
