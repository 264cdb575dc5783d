//! Annotated page images: ground-truth boxes in blue, correct predictions in
//! green, unmatched predictions in red.

use image::{GrayImage, Rgb, RgbImage};
use kuronet::corpus::CharacterBox;
use kuronet::evaluation::match_page;
use kuronet::postprocess::Prediction;

pub const TRUTH: Rgb<u8> = Rgb([30, 80, 230]);
pub const CORRECT: Rgb<u8> = Rgb([20, 170, 50]);
pub const WRONG: Rgb<u8> = Rgb([225, 25, 25]);

/// 3×5 glyphs, one row per `u8` with the low three bits left to right.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c.to_ascii_uppercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 3, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'C' => [3, 4, 4, 4, 3],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [3, 4, 5, 5, 3],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'J' => [1, 1, 1, 5, 2],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'O' => [2, 5, 5, 5, 2],
        'P' => [6, 5, 6, 4, 4],
        'Q' => [2, 5, 5, 6, 3],
        'R' => [6, 5, 6, 5, 5],
        'S' => [3, 4, 2, 1, 6],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        'V' => [5, 5, 5, 5, 2],
        'W' => [5, 5, 7, 7, 5],
        'X' => [5, 5, 2, 5, 5],
        'Y' => [5, 5, 2, 2, 2],
        'Z' => [7, 1, 2, 4, 7],
        '+' => [0, 2, 7, 2, 0],
        _ => return None,
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn text(img: &mut RgbImage, x: i64, y: i64, s: &str, c: Rgb<u8>) {
    for (i, ch) in s.chars().enumerate() {
        let Some(rows) = glyph(ch) else { continue };
        for (dy, bits) in rows.iter().enumerate() {
            for dx in 0..3 {
                if bits & (4 >> dx) != 0 {
                    put(img, x + 4 * i as i64 + dx, y + dy as i64, c);
                }
            }
        }
    }
}

fn outline(img: &mut RgbImage, b: &CharacterBox, c: Rgb<u8>) {
    let (x0, y0) = (b.x as i64, b.y as i64);
    let (x1, y1) = (x0 + b.width as i64 - 1, y0 + b.height as i64 - 1);
    for x in x0..=x1 {
        put(img, x, y0, c);
        put(img, x, y1, c);
    }
    for y in y0..=y1 {
        put(img, x0, y, c);
        put(img, x1, y, c);
    }
}

/// Pixel holding a prediction's marker centre.
pub fn marker_pixel(p: &Prediction, width: u32, height: u32) -> (u32, u32) {
    let clamp = |v: f64, hi: u32| (v.floor().max(0.0) as u32).min(hi - 1);
    (clamp(p.x, width), clamp(p.y, height))
}

/// Draws `boxes` (when known) and `predictions` over a colour copy of the page.
pub fn render(image: &GrayImage, predictions: &[Prediction], boxes: Option<&[CharacterBox]>) -> RgbImage {
    let mut img = RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let v = image.get_pixel(x, y)[0];
        Rgb([v, v, v])
    });
    let mut correct = vec![boxes.is_none(); predictions.len()];
    if let Some(boxes) = boxes {
        for b in boxes {
            outline(&mut img, b, TRUTH);
        }
        for (i, _) in match_page(predictions, boxes).pairs {
            correct[i] = true;
        }
    }
    let colour = |i: usize| if correct[i] { CORRECT } else { WRONG };
    let centres: Vec<(u32, u32)> = predictions
        .iter()
        .map(|p| marker_pixel(p, img.width(), img.height()))
        .collect();
    for (i, p) in predictions.iter().enumerate() {
        let (x, y) = centres[i];
        text(&mut img, x as i64 + 3, y as i64 - 2, &p.codepoint, colour(i));
    }
    for (i, &(x, y)) in centres.iter().enumerate() {
        for (dx, dy) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
            put(&mut img, x as i64 + dx, y as i64 + dy, colour(i));
        }
    }
    // centre pixels last so neighbouring markers never cover them
    for (i, &(x, y)) in centres.iter().enumerate() {
        img.put_pixel(x, y, colour(i));
    }
    img
}
