//! Qualitative exports: an animated GIF of a predicted clip and a horizontal
//! PNG frame grid (time runs left to right, ground truth above prediction
//! when available, caption burned into a footer strip). Both writers are
//! bit-deterministic in their inputs.

use crate::error::{Error, Result};
use ndarray::{Array3, Array4};
use std::io::BufWriter;
use std::path::Path;

/// GIF inter-frame delay.
pub const GIF_DELAY_MS: u32 = 150;
/// Footer strip height: 5-row glyphs plus one row of padding on each side.
pub const FOOTER_H: usize = 7;

const GLYPH_W: usize = 3;
const GLYPH_H: usize = 5;
/// Horizontal advance per character (glyph plus 1px spacing).
const ADVANCE: usize = GLYPH_W + 1;

/// 3×5 pixel font; each row byte holds the glyph's 3 pixels in bits 2..0.
fn glyph(c: char) -> [u8; GLYPH_H] {
    match c.to_ascii_lowercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        'a' => [2, 5, 7, 5, 5],
        'b' => [6, 5, 6, 5, 6],
        'c' => [3, 4, 4, 4, 3],
        'd' => [6, 5, 5, 5, 6],
        'e' => [7, 4, 6, 4, 7],
        'f' => [7, 4, 6, 4, 4],
        'g' => [3, 4, 5, 5, 3],
        'h' => [5, 5, 7, 5, 5],
        'i' => [7, 2, 2, 2, 7],
        'j' => [1, 1, 1, 5, 2],
        'k' => [5, 6, 4, 6, 5],
        'l' => [4, 4, 4, 4, 7],
        'm' => [5, 7, 7, 5, 5],
        'n' => [6, 5, 5, 5, 5],
        'o' => [2, 5, 5, 5, 2],
        'p' => [6, 5, 6, 4, 4],
        'q' => [2, 5, 5, 6, 3],
        'r' => [6, 5, 6, 6, 5],
        's' => [3, 4, 2, 1, 6],
        't' => [7, 2, 2, 2, 2],
        'u' => [5, 5, 5, 5, 7],
        'v' => [5, 5, 5, 5, 2],
        'w' => [5, 5, 7, 7, 5],
        'x' => [5, 5, 2, 5, 5],
        'y' => [5, 5, 2, 2, 2],
        'z' => [7, 1, 2, 4, 7],
        ' ' => [0, 0, 0, 0, 0],
        '-' => [0, 0, 7, 0, 0],
        '.' => [0, 0, 0, 0, 2],
        ',' => [0, 0, 0, 2, 4],
        '\'' => [2, 2, 0, 0, 0],
        '[' => [3, 2, 2, 2, 3],
        ']' => [6, 2, 2, 2, 6],
        _ => [7, 1, 2, 0, 2], // '?'
    }
}

fn check_frames(frames: &Array4<u8>, what: &str) -> Result<(usize, usize, usize)> {
    let s = frames.shape();
    if s[0] == 0 || s[3] != 3 {
        return Err(Error::Validation(format!(
            "{what} frames must be (T, H, W, 3) with T ≥ 1, got {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2]))
}

/// Compose the qualitative grid: frames left→right, ground truth row (when
/// given) above the predicted row, caption footer at the bottom. The grid is
/// exactly `T·W` pixels wide; height is `rows·H + FOOTER_H`.
pub fn frame_grid(
    pred: &Array4<u8>,
    gt: Option<&Array4<u8>>,
    caption: &str,
) -> Result<Array3<u8>> {
    let (t, h, w) = check_frames(pred, "predicted")?;
    if let Some(g) = gt {
        if g.shape() != pred.shape() {
            return Err(Error::Validation(format!(
                "ground-truth shape {:?} does not match predicted {:?}",
                g.shape(),
                pred.shape()
            )));
        }
    }
    let rows: Vec<&Array4<u8>> = gt.into_iter().chain([pred]).collect();
    let width = t * w;
    let height = rows.len() * h + FOOTER_H;
    let mut grid = Array3::<u8>::zeros((height, width, 3));
    for (r, frames) in rows.iter().enumerate() {
        for f in 0..t {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        grid[(r * h + y, f * w + x, c)] = frames[(f, y, x, c)];
                    }
                }
            }
        }
    }
    // Caption, truncated to the grid width; glyphs render white on black.
    let base_y = rows.len() * h + 1;
    for (i, ch) in caption.chars().enumerate() {
        let x0 = i * ADVANCE;
        if x0 + GLYPH_W > width {
            break;
        }
        let rows5 = glyph(ch);
        for (gy, bits) in rows5.iter().enumerate() {
            for gx in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - gx) & 1 == 1 {
                    for c in 0..3 {
                        grid[(base_y + gy, x0 + gx, c)] = 255;
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// Write a composed grid (or any H×W×3 image) as PNG.
pub fn write_png(path: &Path, image: &Array3<u8>) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let data = image
        .as_standard_layout()
        .as_slice()
        .expect("standard layout")
        .to_vec();
    image::save_buffer(
        path,
        &data,
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Format(format!("png write {}: {e}", path.display())))
}

/// Write frames as an animated GIF, `GIF_DELAY_MS` between frames, looping.
pub fn write_gif(path: &Path, frames: &Array4<u8>) -> Result<()> {
    use image::codecs::gif::{GifEncoder, Repeat};
    let (t, h, w) = check_frames(frames, "gif")?;
    let file = std::fs::File::create(path)?;
    let mut enc = GifEncoder::new_with_speed(BufWriter::new(file), 10);
    enc.set_repeat(Repeat::Infinite)
        .map_err(|e| Error::Format(format!("gif write {}: {e}", path.display())))?;
    for f in 0..t {
        let mut buf = image::RgbaImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = image::Rgba([
                    frames[(f, y, x, 0)],
                    frames[(f, y, x, 1)],
                    frames[(f, y, x, 2)],
                    255,
                ]);
                buf.put_pixel(x as u32, y as u32, px);
            }
        }
        let frame = image::Frame::from_parts(
            buf,
            0,
            0,
            image::Delay::from_numer_denom_ms(GIF_DELAY_MS, 1),
        );
        enc.encode_frame(frame)
            .map_err(|e| Error::Format(format!("gif write {}: {e}", path.display())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn solid(t: usize, h: usize, w: usize, level: u8) -> Array4<u8> {
        Array4::from_elem((t, h, w, 3), level)
    }

    #[test]
    fn grid_width_is_frames_times_frame_width() {
        for (t, h, w) in [(5, 32, 32), (3, 16, 16), (11, 8, 8)] {
            let grid = frame_grid(&solid(t, h, w, 10), None, "x").unwrap();
            assert_eq!(grid.shape(), &[h + FOOTER_H, t * w, 3]);
            let both = frame_grid(&solid(t, h, w, 10), Some(&solid(t, h, w, 20)), "x").unwrap();
            assert_eq!(both.shape(), &[2 * h + FOOTER_H, t * w, 3]);
        }
    }

    #[test]
    fn rows_land_in_the_right_cells() {
        let mut pred = solid(2, 4, 4, 0);
        let mut gt = solid(2, 4, 4, 0);
        pred[(1, 2, 3, 0)] = 200; // frame 2 of the prediction
        gt[(0, 1, 1, 2)] = 120; // frame 1 of the ground truth
        let grid = frame_grid(&pred, Some(&gt), "").unwrap();
        assert_eq!(grid[(1, 1, 2)], 120); // GT row on top
        assert_eq!(grid[(4 + 2, 4 + 3, 0)], 200); // prediction row below
        assert_eq!(grid[(0, 0, 0)], 0);
    }

    #[test]
    fn caption_is_burned_into_the_footer() {
        let with = frame_grid(&solid(2, 8, 8, 0), None, "a 9").unwrap();
        let without = frame_grid(&solid(2, 8, 8, 0), None, "").unwrap();
        let footer_sum = |g: &Array3<u8>| -> u64 {
            (8..8 + FOOTER_H)
                .map(|y| (0..16).map(|x| g[(y, x, 0)] as u64).sum::<u64>())
                .sum()
        };
        assert!(footer_sum(&with) > 0);
        assert_eq!(footer_sum(&without), 0);
        // Overlong captions truncate instead of widening the grid.
        let long = frame_grid(&solid(2, 8, 8, 0), None, &"m".repeat(100)).unwrap();
        assert_eq!(long.shape()[1], 16);
    }

    #[test]
    fn mismatched_ground_truth_is_rejected() {
        let err = frame_grid(&solid(2, 8, 8, 0), Some(&solid(3, 8, 8, 0)), "").err();
        assert!(err.is_some());
    }

    #[test]
    fn gif_round_trips_and_is_byte_deterministic() {
        use image::AnimationDecoder;
        let dir = tempdir().unwrap();
        let mut frames = solid(3, 8, 8, 0);
        for f in 0..3 {
            frames[(f, f, f, 1)] = 250;
        }
        let a = dir.path().join("a.gif");
        let b = dir.path().join("b.gif");
        write_gif(&a, &frames).unwrap();
        write_gif(&b, &frames).unwrap();
        let bytes_a = std::fs::read(&a).unwrap();
        assert_eq!(bytes_a, std::fs::read(&b).unwrap());

        let dec =
            image::codecs::gif::GifDecoder::new(std::io::Cursor::new(bytes_a)).unwrap();
        let decoded = dec.into_frames().collect_frames().unwrap();
        assert_eq!(decoded.len(), 3);
        let (num, den) = decoded[0].delay().numer_denom_ms();
        assert_eq!(num as f64 / den as f64, GIF_DELAY_MS as f64);
    }

    #[test]
    fn png_writes_the_grid() {
        let dir = tempdir().unwrap();
        let grid = frame_grid(&solid(2, 8, 8, 33), None, "ok").unwrap();
        let path = dir.path().join("grid.png");
        write_png(&path, &grid).unwrap();
        let img = image::open(&path).unwrap().into_rgb8();
        assert_eq!(img.dimensions(), (16, (8 + FOOTER_H) as u32));
        assert_eq!(img.get_pixel(0, 0).0, [33, 33, 33]);
    }
}
