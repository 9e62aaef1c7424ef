use std::path::{Path, PathBuf};

use clap::Args;
use font8x8::{UnicodeFonts, BASIC_FONTS};
use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};

use crate::{exit, CmdResult, Failure};

const GLYPH: u32 = 8;
const TEXT_SCALE: u32 = 2;
const PAD: u32 = 4;
const CAPTION_HEIGHT: u32 = GLYPH * TEXT_SCALE + 2 * PAD;

#[derive(Args, Debug)]
pub struct GridArgs {
    /// Images as PATH or PATH=CAPTION; the caption defaults to the file stem.
    #[arg(value_name = "IMAGE[=CAPTION]")]
    pub items: Vec<String>,
    #[arg(long, default_value = "grid.png")]
    pub output: PathBuf,
    /// Side of each square tile in pixels.
    #[arg(long, default_value_t = 256)]
    pub cell: u32,
    /// Tiles per row; defaults to ceil(sqrt(n)).
    #[arg(long)]
    pub columns: Option<usize>,
}

pub fn parse_item(item: &str) -> (PathBuf, String) {
    match item.split_once('=') {
        Some((p, c)) => (PathBuf::from(p), c.to_string()),
        None => {
            let p = PathBuf::from(item);
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (p, stem)
        }
    }
}

/// `(rows, columns)` for `n` tiles.
pub fn layout(n: usize, columns: Option<usize>) -> (usize, usize) {
    let cols = columns.unwrap_or_else(|| (n as f64).sqrt().ceil() as usize).clamp(1, n.max(1));
    (n.div_ceil(cols), cols)
}

/// Fits `img` inside a `cell`-sided square, centred on black.
pub fn letterbox(img: &RgbImage, cell: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let scale = cell as f64 / w.max(h) as f64;
    let nw = ((w as f64 * scale).round() as u32).clamp(1, cell);
    let nh = ((h as f64 * scale).round() as u32).clamp(1, cell);
    let resized = imageops::resize(img, nw, nh, FilterType::Triangle);
    let mut out = RgbImage::new(cell, cell);
    imageops::overlay(&mut out, &resized, ((cell - nw) / 2) as i64, ((cell - nh) / 2) as i64);
    out
}

fn draw_text(canvas: &mut RgbImage, text: &str, x0: u32, y0: u32, max_width: u32) {
    let max_chars = (max_width / (GLYPH * TEXT_SCALE)) as usize;
    let mut chars: Vec<char> = text.chars().collect();
    if chars.len() > max_chars {
        chars.truncate(max_chars.saturating_sub(1));
        chars.push('~');
    }
    for (i, ch) in chars.into_iter().enumerate() {
        let glyph = BASIC_FONTS.get(ch).or_else(|| BASIC_FONTS.get('?')).unwrap_or([0; 8]);
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..GLYPH {
                if bits >> col & 1 == 1 {
                    for dy in 0..TEXT_SCALE {
                        for dx in 0..TEXT_SCALE {
                            let x = x0 + (i as u32 * GLYPH + col) * TEXT_SCALE + dx;
                            let y = y0 + row as u32 * TEXT_SCALE + dy;
                            if x < canvas.width() && y < canvas.height() {
                                canvas.put_pixel(x, y, Rgb([0, 0, 0]));
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn compose(tiles: &[(RgbImage, String)], cell: u32, columns: Option<usize>) -> RgbImage {
    let (rows, cols) = layout(tiles.len(), columns);
    let row_h = cell + CAPTION_HEIGHT;
    let mut canvas = RgbImage::from_pixel(cols as u32 * cell, rows as u32 * row_h, Rgb([255, 255, 255]));
    for (i, (img, caption)) in tiles.iter().enumerate() {
        let (x, y) = ((i % cols) as u32 * cell, (i / cols) as u32 * row_h);
        imageops::overlay(&mut canvas, &letterbox(img, cell), x as i64, y as i64);
        draw_text(&mut canvas, caption, x + PAD, y + cell + PAD, cell - 2 * PAD);
    }
    canvas
}

fn load(path: &Path) -> Result<RgbImage, Failure> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| Failure::new(exit::DATA, format!("cannot read {}: {e}", path.display())))
}

pub fn run(a: &GridArgs) -> CmdResult {
    if a.items.is_empty() {
        return Err(Failure::new(exit::USAGE, "grid needs at least one image"));
    }
    if a.cell <= 2 * PAD + GLYPH * TEXT_SCALE {
        return Err(Failure::new(exit::USAGE, "cell is too small for a caption"));
    }
    let tiles = a
        .items
        .iter()
        .map(|s| {
            let (p, c) = parse_item(s);
            Ok((load(&p)?, c))
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let canvas = compose(&tiles, a.cell, a.columns);
    canvas
        .save(&a.output)
        .map_err(|e| Failure::new(exit::FAILURE, format!("cannot write {}: {e}", a.output.display())))?;
    let (rows, cols) = layout(tiles.len(), a.columns);
    println!("{rows}x{cols} grid -> {}", a.output.display());
    Ok(())
}
