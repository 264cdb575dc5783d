use super::{CharacterVocabulary, CorpusError, PageSample, Result};

/// Per-pixel training targets at model resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMaps {
    pub resolution: usize,
    /// 1 where a character core covers the pixel.
    pub presence: Vec<u8>,
    /// Vocabulary index; meaningful only where `presence == 1`.
    pub classes: Vec<u32>,
}

impl LabelMaps {
    pub fn positive_count(&self) -> usize {
        self.presence.iter().filter(|&&p| p == 1).count()
    }

    /// `(row, col, class)` for every positive pixel in row-major order.
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let r = self.resolution;
        self.presence
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == 1)
            .map(move |(i, _)| (i / r, i % r, self.classes[i] as usize))
    }
}

/// Pixel indices whose centres fall in `[lo, hi)`; the pixel holding
/// `center` when that is empty.
fn core_span(lo: f64, hi: f64, center: f64, r: usize) -> (usize, usize) {
    let start = (lo - 0.5).ceil().max(0.0) as usize;
    let end = ((hi - 0.5).ceil().max(0.0) as usize).min(r);
    if start < end {
        (start, end)
    } else {
        let c = (center.floor().max(0.0) as usize).min(r - 1);
        (c, c + 1)
    }
}

/// Marks the central half-width, half-height core of every box, scaled from
/// the page's pixel grid to `r × r`. Later boxes overwrite earlier ones.
pub fn rasterize_labels(sample: &PageSample, vocab: &CharacterVocabulary, r: usize) -> Result<LabelMaps> {
    if r == 0 || !r.is_multiple_of(16) {
        return Err(CorpusError::Resolution(r));
    }
    let (w0, h0) = sample.dimensions();
    let (sx, sy) = (r as f64 / w0 as f64, r as f64 / h0 as f64);
    let mut presence = vec![0u8; r * r];
    let mut classes = vec![0u32; r * r];
    for b in &sample.boxes {
        let (bw, bh) = (b.width as f64 * sx, b.height as f64 * sy);
        let (cx, cy) = (
            (b.x as f64 + b.width as f64 / 2.0) * sx,
            (b.y as f64 + b.height as f64 / 2.0) * sy,
        );
        let (c0, c1) = core_span(cx - bw / 4.0, cx + bw / 4.0, cx, r);
        let (r0, r1) = core_span(cy - bh / 4.0, cy + bh / 4.0, cy, r);
        let class = vocab.index_of(&b.codepoint) as u32;
        for row in r0..r1 {
            for col in c0..c1 {
                presence[row * r + col] = 1;
                classes[row * r + col] = class;
            }
        }
    }
    Ok(LabelMaps {
        resolution: r,
        presence,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use image::GrayImage;
    use proptest::prelude::*;

    use super::*;
    use crate::corpus::CharacterBox;

    fn page(w: u32, h: u32, boxes: Vec<CharacterBox>) -> PageSample {
        PageSample {
            page_id: "p".into(),
            book_id: "b".into(),
            image: GrayImage::new(w, h),
            boxes,
        }
    }

    fn bx(cp: &str, x: u32, y: u32, w: u32, h: u32) -> CharacterBox {
        CharacterBox {
            codepoint: cp.into(),
            x,
            y,
            width: w,
            height: h,
        }
    }

    fn vocab() -> CharacterVocabulary {
        CharacterVocabulary::from_tokens(vec!["OTHER".into(), "A".into(), "B".into()]).unwrap()
    }

    #[test]
    fn full_page_box_marks_central_half() {
        let maps = rasterize_labels(&page(640, 640, vec![bx("A", 0, 0, 640, 640)]), &vocab(), 640).unwrap();
        assert_eq!(maps.positive_count(), 320 * 320);
        for (row, col, class) in maps.positives() {
            assert!((160..480).contains(&row) && (160..480).contains(&col));
            assert_eq!(class, 1);
        }
    }

    #[test]
    fn sub_pixel_box_marks_its_centre_pixel() {
        // 2x2 box at (101,301) on a 1000x1000 page → 0.032 px at r=16
        let maps = rasterize_labels(&page(1000, 1000, vec![bx("B", 101, 301, 2, 2)]), &vocab(), 16).unwrap();
        let hits: Vec<_> = maps.positives().collect();
        assert_eq!(hits, vec![(4, 1, 2)]);
    }

    #[test]
    fn disjoint_boxes_add_their_core_areas() {
        let boxes = vec![bx("A", 0, 0, 32, 32), bx("B", 64, 64, 16, 48)];
        let maps = rasterize_labels(&page(128, 128, boxes), &vocab(), 128).unwrap();
        assert_eq!(maps.positive_count(), 16 * 16 + 8 * 24);
    }

    #[test]
    fn later_boxes_win_on_overlap_and_unknown_tokens_map_to_other() {
        let boxes = vec![bx("A", 0, 0, 32, 32), bx("Z", 0, 0, 32, 32)];
        let maps = rasterize_labels(&page(32, 32, boxes), &vocab(), 32).unwrap();
        assert!(maps.positives().all(|(_, _, c)| c == 0));
    }

    #[test]
    fn resolution_must_be_multiple_of_sixteen() {
        assert!(matches!(
            rasterize_labels(&page(10, 10, vec![]), &vocab(), 40),
            Err(CorpusError::Resolution(40))
        ));
    }

    proptest! {
        #[test]
        fn presence_stays_inside_scaled_boxes(
            specs in proptest::collection::vec((0u32..180, 0u32..230, 1u32..20, 1u32..20), 1..6),
        ) {
            let boxes: Vec<_> = specs.iter().map(|&(x, y, w, h)| bx("A", x, y, w, h)).collect();
            let sample = page(200, 250, boxes.clone());
            let maps = rasterize_labels(&sample, &vocab(), 32).unwrap();
            let (sx, sy) = (32.0 / 200.0, 32.0 / 250.0);
            for (row, col, class) in maps.positives() {
                prop_assert!(class < vocab().len());
                let inside = boxes.iter().any(|b| {
                    let (x0, x1) = (b.x as f64 * sx, (b.x + b.width) as f64 * sx);
                    let (y0, y1) = (b.y as f64 * sy, (b.y + b.height) as f64 * sy);
                    // pixel overlaps the scaled box
                    (col as f64) < x1 && (col + 1) as f64 > x0 && (row as f64) < y1 && (row + 1) as f64 > y0
                });
                prop_assert!(inside, "pixel ({row},{col}) outside every box");
            }
        }
    }
}
