//! Side-by-side comparison figure: input | generated | ground truth, with a
//! labeled header strip rendered from a built-in 5x7 bitmap font.

use anyhow::{bail, Result};
use std::path::Path;

use xmt_core::raster::Raster;

const GUTTER: usize = 4;
const LABEL_H: usize = 11;
const LABELS: [&str; 3] = ["INPUT MRI", "GENERATED", "GROUND TRUTH"];

/// 5x7 uppercase glyphs, one byte per row, low 5 bits used.
fn glyph(c: char) -> [u8; 7] {
    match c {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0E],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        _ => [0; 7],
    }
}

fn draw_label(canvas: &mut Raster, text: &str, x0: usize, max_w: usize) {
    let mut x = x0 + 2;
    for c in text.chars() {
        if x + 5 >= x0 + max_w {
            break;
        }
        let rows = glyph(c);
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..5 {
                if row & (0x10 >> dx) != 0 {
                    for ch in 0..3 {
                        canvas.set(x + dx, 2 + dy, ch, 0);
                    }
                }
            }
        }
        x += 6;
    }
}

/// Compose the triplet into one RGB PNG: three equal columns separated by
/// fixed gutters under a label strip. Grayscale panels are replicated to
/// RGB. Output width is `3 * input width + 2 * gutter`.
pub fn emit_comparison_figure(
    input: &Raster,
    generated: &Raster,
    truth: &Raster,
    path: &Path,
) -> Result<()> {
    let (w, h) = (input.width(), input.height());
    for (name, r) in [("generated", generated), ("ground truth", truth)] {
        if (r.width(), r.height()) != (w, h) {
            bail!(
                "{name} panel is {}x{}, input panel is {w}x{h}",
                r.width(),
                r.height()
            );
        }
    }
    let panels = [input.to_rgb(), generated.to_rgb(), truth.to_rgb()];
    let total_w = 3 * w + 2 * GUTTER;
    let total_h = h + LABEL_H;
    let mut canvas = Raster::filled(total_w, total_h, 3, 255)?;
    for (i, panel) in panels.iter().enumerate() {
        let x0 = i * (w + GUTTER);
        draw_label(&mut canvas, LABELS[i], x0, w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    canvas.set(x0 + x, LABEL_H + y, c, panel.get(x, y, c));
                }
            }
        }
    }
    canvas.save_png(path)?;
    Ok(())
}
