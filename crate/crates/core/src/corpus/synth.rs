//! Procedural labelled pages.
//!
//! Each class owns a few glyph variants built from straight strokes on a
//! 5×5 lattice; one stroke always crosses the glyph centre so every
//! character core carries ink. Main text runs top to bottom in columns
//! ordered right to left. Optional stress features: small unlabelled
//! annotation glyphs between columns, framed illustrations that text wraps
//! around, and a faint mirrored ghost of another page.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{io_err, save_book, CharacterBox, CorpusError, PageSample, Result};

/// Number of distinct class tokens the generator can name.
pub const GLYPH_CAPACITY: usize = 4096;
pub const MAX_VARIANTS: usize = 8;
pub const ILLUSTRATIONS_NAME: &str = "illustrations.json";
/// Peak darkening contributed by the mirrored ghost page.
pub const BLEED_INTENSITY: f32 = 0.12;
const INK: f32 = 0.1;
const LATTICE: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Pages per book.
    pub pages: usize,
    pub width: u32,
    pub height: u32,
    pub num_classes: usize,
    pub variants_per_class: usize,
    /// Side of a main-text glyph box in pixels.
    pub glyph_size: u32,
    /// Upper bound on main-text columns per page.
    pub columns: usize,
    pub min_chars_per_column: usize,
    pub max_chars_per_column: usize,
    pub annotations: bool,
    pub illustrations: bool,
    pub bleed_through: bool,
    /// Seeds the glyph shapes, independent of page layout.
    pub glyph_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            pages: 8,
            width: 256,
            height: 256,
            num_classes: 10,
            variants_per_class: 2,
            glyph_size: 24,
            columns: 5,
            min_chars_per_column: 3,
            max_chars_per_column: 8,
            annotations: true,
            illustrations: true,
            bleed_through: true,
            glyph_seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CorpusError::Synth(m));
        if self.num_classes == 0 || self.num_classes > GLYPH_CAPACITY {
            return fail(format!("num_classes {} outside 1..={GLYPH_CAPACITY}", self.num_classes));
        }
        if self.variants_per_class == 0 || self.variants_per_class > MAX_VARIANTS {
            return fail(format!(
                "variants_per_class {} outside 1..={MAX_VARIANTS}",
                self.variants_per_class
            ));
        }
        if self.glyph_size < 8 {
            return fail(format!("glyph_size {} below 8 pixels", self.glyph_size));
        }
        if self.min_chars_per_column == 0 || self.min_chars_per_column > self.max_chars_per_column {
            return fail("chars per column range must satisfy 1 <= min <= max".into());
        }
        if self.columns == 0 {
            return fail("columns must be positive".into());
        }
        let g = Geometry::new(self);
        if g.fit_columns == 0 || g.fit_rows == 0 {
            return fail(format!(
                "a {}x{} page cannot hold a {}px glyph",
                self.width, self.height, self.glyph_size
            ));
        }
        Ok(())
    }
}

/// Class token for a generated class index.
pub fn class_token(class: usize) -> String {
    format!("U+{:04X}", 0x4E00 + class)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub fn intersects(&self, other: &Rect) -> bool {
        self.x < other.x + other.width
            && other.x < self.x + self.width
            && self.y < other.y + other.height
            && other.y < self.y + self.height
    }
}

type Stroke = [(usize, usize); 2];

#[derive(Debug, Clone, PartialEq, Eq)]
struct Glyph {
    strokes: Vec<Stroke>,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn random_glyph(rng: &mut ChaCha8Rng) -> Glyph {
    let c = LATTICE / 2;
    let a = loop {
        let p = (rng.random_range(0..LATTICE), rng.random_range(0..LATTICE));
        if p.0.abs_diff(c).max(p.1.abs_diff(c)) == c {
            break p;
        }
    };
    let mut strokes = vec![[a, (2 * c - a.0, 2 * c - a.1)]];
    let extra = rng.random_range(2..=3);
    while strokes.len() < 1 + extra {
        let p = (rng.random_range(0..LATTICE), rng.random_range(0..LATTICE));
        let q = (rng.random_range(0..LATTICE), rng.random_range(0..LATTICE));
        if p.0.abs_diff(q.0).max(p.1.abs_diff(q.1)) < 2 {
            continue;
        }
        let s = if p < q { [p, q] } else { [q, p] };
        if !strokes.contains(&s) {
            strokes.push(s);
        }
    }
    strokes[1..].sort();
    Glyph { strokes }
}

/// Every (class, variant) glyph, pairwise distinct.
struct GlyphBank {
    variants: usize,
    glyphs: Vec<Glyph>,
}

impl GlyphBank {
    fn new(spec: &SynthSpec) -> Self {
        let mut seen = HashSet::new();
        let mut glyphs = Vec::with_capacity(spec.num_classes * spec.variants_per_class);
        for class in 0..spec.num_classes {
            for variant in 0..spec.variants_per_class {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.glyph_seed, class as u64, variant as u64));
                let g = loop {
                    let g = random_glyph(&mut rng);
                    if seen.insert(g.strokes.clone()) {
                        break g;
                    }
                };
                glyphs.push(g);
            }
        }
        Self {
            variants: spec.variants_per_class,
            glyphs,
        }
    }

    fn get(&self, class: usize, variant: usize) -> &Glyph {
        &self.glyphs[class * self.variants + variant]
    }
}

/// Ink coverage in `[0, 1]` per pixel.
struct Canvas {
    width: u32,
    height: u32,
    cov: Vec<f32>,
}

impl Canvas {
    fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            cov: vec![0.0; (width * height) as usize],
        }
    }

    fn stamp(&mut self, x: u32, y: u32, value: f32) {
        if x < self.width && y < self.height {
            let c = &mut self.cov[(y * self.width + x) as usize];
            *c = c.max(value);
        }
    }

    /// Anti-aliased thick segment between two points in pixel coordinates.
    fn line(&mut self, a: (f32, f32), b: (f32, f32), thickness: f32) {
        let r = thickness / 2.0 + 1.0;
        let x0 = (a.0.min(b.0) - r).floor().max(0.0) as u32;
        let x1 = (a.0.max(b.0) + r).ceil().max(0.0) as u32;
        let y0 = (a.1.min(b.1) - r).floor().max(0.0) as u32;
        let y1 = (a.1.max(b.1) + r).ceil().max(0.0) as u32;
        for y in y0..=y1.min(self.height.saturating_sub(1)) {
            for x in x0..=x1.min(self.width.saturating_sub(1)) {
                let d = segment_distance((x as f32 + 0.5, y as f32 + 0.5), a, b);
                let c = (thickness / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                if c > 0.0 {
                    self.stamp(x, y, c);
                }
            }
        }
    }

    fn glyph(&mut self, g: &Glyph, x: u32, y: u32, size: u32) {
        let s = size as f32;
        let at = |(i, j): (usize, usize)| {
            let step = 0.7 / (LATTICE - 1) as f32;
            (
                x as f32 + s * (0.15 + step * i as f32),
                y as f32 + s * (0.15 + step * j as f32),
            )
        };
        let thickness = (s * 0.1).max(1.5);
        for st in &g.strokes {
            self.line(at(st[0]), at(st[1]), thickness);
        }
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    let (dx, dy) = (p.0 - (a.0 + t * vx), p.1 - (a.1 + t * vy));
    (dx * dx + dy * dy).sqrt()
}

struct Geometry {
    size: u32,
    gap: u32,
    col_pitch: u32,
    row_pitch: u32,
    margin: u32,
    fit_columns: usize,
    fit_rows: usize,
}

impl Geometry {
    fn new(spec: &SynthSpec) -> Self {
        let size = spec.glyph_size;
        let gap = (size * 7).div_ceil(10);
        let col_pitch = size + gap;
        let row_pitch = (size * 6).div_ceil(5);
        let margin = size / 2;
        let usable_w = spec.width.saturating_sub(2 * margin);
        let usable_h = spec.height.saturating_sub(2 * margin);
        let fit_columns = if usable_w >= size {
            ((usable_w - size) / col_pitch + 1) as usize
        } else {
            0
        };
        let fit_rows = if usable_h >= size {
            ((usable_h - size) / row_pitch + 1) as usize
        } else {
            0
        };
        Self {
            size,
            gap,
            col_pitch,
            row_pitch,
            margin,
            fit_columns,
            fit_rows,
        }
    }
}

/// A generated book plus the illustration rectangles of each page.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBook {
    pub book_id: String,
    pub pages: Vec<PageSample>,
    pub illustrations: Vec<Vec<Rect>>,
    /// Page background tone per page, before noise.
    pub background: Vec<f32>,
}

impl SyntheticBook {
    /// Writes `<out>/<book_id>/{images/*.png, coordinates.csv}` plus
    /// `illustrations.json` mapping page ids to illustration rectangles.
    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let dir = out.join(&self.book_id);
        save_book(&dir, &self.pages)?;
        let rects: BTreeMap<&str, &Vec<Rect>> = self
            .pages
            .iter()
            .map(|p| p.page_id.as_str())
            .zip(&self.illustrations)
            .collect();
        let path = dir.join(ILLUSTRATIONS_NAME);
        let json = serde_json::to_string_pretty(&rects).expect("rectangles serialize");
        std::fs::write(&path, json + "\n").map_err(io_err(&path))?;
        Ok(dir)
    }
}

struct PageLayout {
    boxes: Vec<(CharacterBox, usize, usize)>,
}

/// Lays out main-text columns; cells overlapping an illustration are skipped.
fn layout_text(spec: &SynthSpec, geo: &Geometry, rng: &mut ChaCha8Rng, avoid: &[Rect]) -> PageLayout {
    let columns = spec.columns.min(geo.fit_columns);
    let jitter = (geo.size / 12) as i64;
    let mut boxes = Vec::new();
    for c in 0..columns {
        let x_base = spec.width - geo.margin - geo.size - c as u32 * geo.col_pitch;
        let rows = rng
            .random_range(spec.min_chars_per_column..=spec.max_chars_per_column)
            .min(geo.fit_rows);
        for k in 0..rows {
            let class = rng.random_range(0..spec.num_classes);
            let variant = rng.random_range(0..spec.variants_per_class);
            let dx = rng.random_range(-jitter..=jitter);
            let x = (x_base as i64 + dx).clamp(0, (spec.width - geo.size) as i64) as u32;
            let y = geo.margin + k as u32 * geo.row_pitch;
            let cell = Rect {
                x,
                y,
                width: geo.size,
                height: geo.size,
            };
            if avoid.iter().any(|r| r.intersects(&cell)) {
                continue;
            }
            let b = CharacterBox {
                codepoint: class_token(class),
                x,
                y,
                width: geo.size,
                height: geo.size,
            };
            boxes.push((b, class, variant));
        }
    }
    PageLayout { boxes }
}

fn draw_illustration(canvas: &mut Canvas, r: &Rect, rng: &mut ChaCha8Rng) {
    let (x0, y0) = (r.x as f32 + 2.0, r.y as f32 + 2.0);
    let (x1, y1) = ((r.x + r.width) as f32 - 2.0, (r.y + r.height) as f32 - 2.0);
    for (a, b) in [
        ((x0, y0), (x1, y0)),
        ((x1, y0), (x1, y1)),
        ((x1, y1), (x0, y1)),
        ((x0, y1), (x0, y0)),
    ] {
        canvas.line(a, b, 2.5);
    }
    let strokes = rng.random_range(6..14);
    for _ in 0..strokes {
        let a = (rng.random_range(x0..x1), rng.random_range(y0..y1));
        let b = (rng.random_range(x0..x1), rng.random_range(y0..y1));
        canvas.line(a, b, rng.random_range(1.0..4.0));
    }
}

fn generate_page(
    spec: &SynthSpec,
    bank: &GlyphBank,
    page_id: String,
    book_id: &str,
    rng: &mut ChaCha8Rng,
) -> (PageSample, Vec<Rect>, f32) {
    let geo = Geometry::new(spec);
    // independent streams, so toggling one feature never moves another
    let mut layout_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut annot_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut illus_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut bleed_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());

    let background = layout_rng.random_range(0.8f32..0.95);
    let mut illustrations = Vec::new();
    if spec.illustrations && illus_rng.random_bool(0.5) {
        let w = illus_rng.random_range(spec.width / 4..=spec.width / 2);
        let h = illus_rng.random_range(spec.height / 4..=spec.height / 2);
        illustrations.push(Rect {
            x: illus_rng.random_range(0..=spec.width - w),
            y: illus_rng.random_range(0..=spec.height - h),
            width: w,
            height: h,
        });
    }
    let layout = layout_text(spec, &geo, &mut layout_rng, &illustrations);

    let mut canvas = Canvas::new(spec.width, spec.height);
    for (b, class, variant) in &layout.boxes {
        canvas.glyph(bank.get(*class, *variant), b.x, b.y, geo.size);
    }
    for r in &illustrations {
        draw_illustration(&mut canvas, r, &mut illus_rng);
    }
    if spec.annotations {
        let small = geo.size / 2;
        for (b, _, _) in &layout.boxes {
            if !annot_rng.random_bool(0.35) {
                continue;
            }
            let class = annot_rng.random_range(0..spec.num_classes);
            let variant = annot_rng.random_range(0..spec.variants_per_class);
            let offset = annot_rng.random_range(0..=geo.size - small);
            let Some(x) = b.x.checked_sub(geo.gap / 2 + small / 2) else {
                continue;
            };
            let cell = Rect {
                x,
                y: b.y + offset,
                width: small,
                height: small,
            };
            if illustrations.iter().any(|r| r.intersects(&cell)) {
                continue;
            }
            canvas.glyph(bank.get(class, variant), cell.x, cell.y, small);
        }
    }
    let ghost = spec.bleed_through.then(|| {
        let other = layout_text(spec, &geo, &mut bleed_rng, &[]);
        let mut g = Canvas::new(spec.width, spec.height);
        for (b, class, variant) in &other.boxes {
            // mirrored about the vertical axis
            g.glyph(bank.get(*class, *variant), spec.width - b.x - geo.size, b.y, geo.size);
        }
        g
    });

    let image = GrayImage::from_fn(spec.width, spec.height, |x, y| {
        let i = (y * spec.width + x) as usize;
        let tone = background + noise_rng.random_range(-0.03f32..0.03);
        let mut v = tone - (tone - INK) * canvas.cov[i];
        if let Some(g) = &ghost {
            v -= BLEED_INTENSITY * g.cov[i] * (tone - INK);
        }
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    let page = PageSample {
        page_id,
        book_id: book_id.to_string(),
        image,
        boxes: layout.boxes.into_iter().map(|(b, _, _)| b).collect(),
    };
    (page, illustrations, background)
}

/// Generates one book. Glyph shapes depend only on `spec.glyph_seed`;
/// page layouts and noise come from `rng`.
pub fn generate_synthetic_book(spec: &SynthSpec, book_id: &str, rng: &mut ChaCha8Rng) -> Result<SyntheticBook> {
    spec.validate()?;
    let bank = GlyphBank::new(spec);
    let mut book = SyntheticBook {
        book_id: book_id.to_string(),
        pages: Vec::with_capacity(spec.pages),
        illustrations: Vec::with_capacity(spec.pages),
        background: Vec::with_capacity(spec.pages),
    };
    for p in 0..spec.pages {
        let (page, rects, bg) = generate_page(spec, &bank, format!("{book_id}_{p:03}"), book_id, rng);
        book.pages.push(page);
        book.illustrations.push(rects);
        book.background.push(bg);
    }
    Ok(book)
}

/// `books` books named `<prefix>000`, `<prefix>001`, …; book `i` draws
/// from stream `i` of a generator seeded with `seed`.
pub fn generate_synthetic_corpus(
    spec: &SynthSpec,
    books: usize,
    seed: u64,
    prefix: &str,
) -> Result<Vec<SyntheticBook>> {
    (0..books)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_synthetic_book(spec, &format!("{prefix}{i:03}"), &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain_spec() -> SynthSpec {
        SynthSpec {
            pages: 1,
            columns: 1,
            min_chars_per_column: 3,
            max_chars_per_column: 3,
            annotations: false,
            illustrations: false,
            bleed_through: false,
            ..SynthSpec::default()
        }
    }

    fn book(spec: &SynthSpec, seed: u64) -> SyntheticBook {
        generate_synthetic_book(spec, "b", &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn single_column_of_three() {
        let b = book(&plain_spec(), 1);
        let boxes = &b.pages[0].boxes;
        assert_eq!(boxes.len(), 3);
        for pair in boxes.windows(2) {
            assert!(pair[0].y + pair[0].height <= pair[1].y, "{pair:?}");
        }
    }

    #[test]
    fn annotations_change_pixels_but_not_labels() {
        let mut spec = SynthSpec {
            pages: 3,
            illustrations: false,
            ..SynthSpec::default()
        };
        spec.annotations = false;
        let off = book(&spec, 9);
        spec.annotations = true;
        let on = book(&spec, 9);
        for (a, b) in off.pages.iter().zip(&on.pages) {
            assert_eq!(a.boxes, b.boxes);
        }
        assert!(off.pages.iter().zip(&on.pages).any(|(a, b)| a.image != b.image));
    }

    #[test]
    fn same_seed_same_book() {
        let spec = SynthSpec::default();
        assert_eq!(book(&spec, 4), book(&spec, 4));
        assert_ne!(book(&spec, 4), book(&spec, 5));
    }

    #[test]
    fn glyphs_are_pairwise_distinct_and_seed_stable() {
        let spec = SynthSpec {
            num_classes: 200,
            variants_per_class: 3,
            ..SynthSpec::default()
        };
        let bank = GlyphBank::new(&spec);
        let set: HashSet<_> = bank.glyphs.iter().map(|g| g.strokes.clone()).collect();
        assert_eq!(set.len(), 600);
        assert_eq!(GlyphBank::new(&spec).glyphs, bank.glyphs);
    }

    #[test]
    fn capacity_enforced() {
        let spec = SynthSpec {
            num_classes: GLYPH_CAPACITY + 1,
            ..SynthSpec::default()
        };
        assert!(matches!(spec.validate(), Err(CorpusError::Synth(_))));
    }

    #[test]
    fn boxes_in_bounds_dark_cores_and_clear_of_illustrations() {
        let spec = SynthSpec {
            pages: 12,
            ..SynthSpec::default()
        };
        let b = book(&spec, 77);
        assert!(b.illustrations.iter().any(|r| !r.is_empty()));
        for ((page, rects), &bg) in b.pages.iter().zip(&b.illustrations).zip(&b.background) {
            for bx in &page.boxes {
                assert!(bx.x + bx.width <= spec.width && bx.y + bx.height <= spec.height);
                let cell = Rect {
                    x: bx.x,
                    y: bx.y,
                    width: bx.width,
                    height: bx.height,
                };
                assert!(rects.iter().all(|r| !r.intersects(&cell)));
                let (qx, qy) = (bx.width / 4, bx.height / 4);
                let mut sum = 0.0;
                let mut n = 0.0;
                for y in bx.y + qy..bx.y + bx.height - qy {
                    for x in bx.x + qx..bx.x + bx.width - qx {
                        sum += page.image.get_pixel(x, y)[0] as f32 / 255.0;
                        n += 1.0;
                    }
                }
                assert!(sum / n < bg - 0.05, "core mean {} vs background {bg}", sum / n);
            }
        }
    }
}
