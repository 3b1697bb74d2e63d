//! Diagnostic figures: input spectrogram, thresholded prediction, and ground
//! truth stacked vertically, written as both PNG and SVG (the SVG embeds the
//! PNG so either file stands alone). Output pixels are a pure function of the
//! inputs — no timestamps, no gradients that depend on float printing.

use std::path::{Path, PathBuf};

use base64::Engine;
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::util;

/// Gap in output pixels between stacked panels.
const PANEL_GAP: u32 = 2;
/// Gray level of the gap rows.
const GAP_GRAY: u8 = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Scores strictly above this are drawn as flagged.
    pub threshold: f64,
    /// Output pixels per spectrogram cell; `None` picks 4 for small inputs
    /// (≤ 64 rows) and 1 otherwise.
    pub scale: Option<u32>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { threshold: 0.5, scale: None }
    }
}

/// Paths written by [`render_figure`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFigure {
    pub png: PathBuf,
    pub svg: PathBuf,
    pub width: u32,
    pub height: u32,
}

fn effective_scale(rows: usize, options: &RenderOptions) -> u32 {
    options.scale.unwrap_or(if rows <= 64 { 4 } else { 1 }).max(1)
}

/// Render the three-panel diagnostic figure. `out` names the PNG (with or
/// without the extension); the SVG lands next to it with the same stem.
pub fn render_figure(
    data: &Array2<f32>,
    scores: &Array2<f32>,
    truth: &Array2<bool>,
    options: &RenderOptions,
    out: &Path,
) -> Result<RenderedFigure> {
    let (rows, cols) = data.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::Data("cannot render an empty spectrogram".into()));
    }
    if scores.dim() != (rows, cols) || truth.dim() != (rows, cols) {
        return Err(Error::Data(format!(
            "panel shapes differ: data {:?}, scores {:?}, truth {:?}",
            data.dim(),
            scores.dim(),
            truth.dim()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) || scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite values in figure inputs".into()));
    }

    let scale = effective_scale(rows, options);
    let panel_h = rows as u32 * scale;
    let width = cols as u32 * scale;
    let height = 3 * panel_h + 2 * PANEL_GAP;

    // Input panel: min–max normalized magnitudes (flat input → black).
    let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let shade = |v: f32| -> u8 {
        if span <= 0.0 {
            0
        } else {
            (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
        }
    };

    let mut image = image::GrayImage::from_pixel(width, height, image::Luma([GAP_GRAY]));
    let mut put_panel = |panel: usize, value: &dyn Fn(usize, usize) -> u8| {
        let y0 = panel as u32 * (panel_h + PANEL_GAP);
        for r in 0..rows {
            for c in 0..cols {
                let v = value(r, c);
                for dy in 0..scale {
                    for dx in 0..scale {
                        image.put_pixel(
                            c as u32 * scale + dx,
                            y0 + r as u32 * scale + dy,
                            image::Luma([v]),
                        );
                    }
                }
            }
        }
    };
    put_panel(0, &|r, c| shade(data[[r, c]]));
    let thr = options.threshold;
    put_panel(1, &|r, c| if f64::from(scores[[r, c]]) > thr { 255 } else { 0 });
    put_panel(2, &|r, c| if truth[[r, c]] { 255 } else { 0 });

    let png_path = out.with_extension("png");
    let svg_path = out.with_extension("svg");
    let mut png_bytes = Vec::new();
    image
        .write_to(&mut std::io::Cursor::new(&mut png_bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Format { offset: 0, msg: format!("PNG encoding failed: {e}") })?;
    util::atomic_write(&png_path, &png_bytes)?;

    let b64 = base64::engine::general_purpose::STANDARD.encode(&png_bytes);
    let svg = format!(
        concat!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" "#,
            r#"width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
            "\n",
            r#"  <image width="{w}" height="{h}" image-rendering="pixelated" "#,
            r#"xlink:href="data:image/png;base64,{b64}"/>"#,
            "\n</svg>\n"
        ),
        w = width,
        h = height,
        b64 = b64,
    );
    util::atomic_write(&svg_path, svg.as_bytes())?;

    Ok(RenderedFigure { png: png_path, svg: svg_path, width, height })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open_gray(path: &Path) -> image::GrayImage {
        image::open(path).expect("valid image").to_luma8()
    }

    fn panel(img: &image::GrayImage, index: u32, panel_h: u32) -> Vec<u8> {
        let y0 = index * (panel_h + PANEL_GAP);
        let mut out = Vec::new();
        for y in y0..y0 + panel_h {
            for x in 0..img.width() {
                out.push(img.get_pixel(x, y).0[0]);
            }
        }
        out
    }

    #[test]
    fn all_zero_inputs_yield_blank_panels() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("fig");
        let data = Array2::<f32>::zeros((8, 8));
        let scores = Array2::<f32>::zeros((8, 8));
        let truth = Array2::<bool>::from_elem((8, 8), false);
        let fig = render_figure(&data, &scores, &truth, &RenderOptions::default(), &out).unwrap();
        assert!(fig.png.exists());
        assert!(fig.svg.exists());
        let img = open_gray(&fig.png);
        assert_eq!((img.width(), img.height()), (fig.width, fig.height));
        assert_eq!((fig.width, fig.height), (32, 3 * 32 + 4));
        let panel_h = 32;
        for i in 0..3 {
            assert!(
                panel(&img, i, panel_h).iter().all(|&v| v == 0),
                "panel {i} not blank"
            );
        }
        let svg = std::fs::read_to_string(&fig.svg).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("data:image/png;base64,"));
    }

    #[test]
    fn prediction_equal_to_truth_gives_identical_panels() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("fig.png");
        let mut data = Array2::<f32>::zeros((8, 6));
        let mut scores = Array2::<f32>::zeros((8, 6));
        let mut truth = Array2::<bool>::from_elem((8, 6), false);
        for r in 0..8 {
            data[[r, 2]] = 1.0;
            scores[[r, 2]] = 0.93;
            truth[[r, 2]] = true;
        }
        let fig = render_figure(&data, &scores, &truth, &RenderOptions::default(), &out).unwrap();
        let img = open_gray(&fig.png);
        let panel_h = 8 * 4;
        assert_eq!(panel(&img, 1, panel_h), panel(&img, 2, panel_h));
        // And the columns actually differ from blank.
        assert!(panel(&img, 1, panel_h).iter().any(|&v| v == 255));
    }

    #[test]
    fn checkerboard_mask_renders_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("board");
        let n = 8;
        let data = Array2::<f32>::zeros((n, n));
        let scores = Array2::<f32>::zeros((n, n));
        let truth = Array2::from_shape_fn((n, n), |(r, c)| (r + c) % 2 == 0);
        let options = RenderOptions { threshold: 0.5, scale: Some(4) };
        let fig = render_figure(&data, &scores, &truth, &options, &out).unwrap();
        let img = open_gray(&fig.png);
        let panel_h = n as u32 * 4;
        let y0 = 2 * (panel_h + PANEL_GAP);
        for r in 0..n {
            for c in 0..n {
                let expect = if (r + c) % 2 == 0 { 255 } else { 0 };
                for dy in 0..4u32 {
                    for dx in 0..4u32 {
                        let got =
                            img.get_pixel(c as u32 * 4 + dx, y0 + r as u32 * 4 + dy).0[0];
                        assert_eq!(got, expect, "cell ({r},{c}) offset ({dy},{dx})");
                    }
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array2::from_shape_fn((16, 16), |(r, c)| (r * 31 + c * 7) as f32 / 300.0);
        let scores = Array2::from_shape_fn((16, 16), |(r, c)| ((r + c) % 5) as f32 / 4.0);
        let truth = Array2::from_shape_fn((16, 16), |(r, c)| r + c > 20);
        let a = render_figure(
            &data,
            &scores,
            &truth,
            &RenderOptions::default(),
            &dir.path().join("a"),
        )
        .unwrap();
        let b = render_figure(
            &data,
            &scores,
            &truth,
            &RenderOptions::default(),
            &dir.path().join("b"),
        )
        .unwrap();
        assert_eq!(std::fs::read(&a.png).unwrap(), std::fs::read(&b.png).unwrap());
        assert_eq!(std::fs::read(&a.svg).unwrap(), std::fs::read(&b.svg).unwrap());
    }

    #[test]
    fn shape_mismatch_and_empty_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x");
        let data = Array2::<f32>::zeros((4, 4));
        let scores = Array2::<f32>::zeros((4, 5));
        let truth = Array2::<bool>::from_elem((4, 4), false);
        let err =
            render_figure(&data, &scores, &truth, &RenderOptions::default(), &out).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        let empty = Array2::<f32>::zeros((0, 0));
        let empty_truth = Array2::<bool>::from_elem((0, 0), false);
        let err = render_figure(&empty, &empty, &empty_truth, &RenderOptions::default(), &out)
            .unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        let mut bad = Array2::<f32>::zeros((4, 4));
        bad[[0, 0]] = f32::NAN;
        let scores = Array2::<f32>::zeros((4, 4));
        let err =
            render_figure(&bad, &scores, &truth, &RenderOptions::default(), &out).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn large_inputs_render_at_native_scale() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array2::<f32>::zeros((65, 10));
        let scores = Array2::<f32>::zeros((65, 10));
        let truth = Array2::<bool>::from_elem((65, 10), false);
        let fig = render_figure(
            &data,
            &scores,
            &truth,
            &RenderOptions::default(),
            &dir.path().join("big"),
        )
        .unwrap();
        assert_eq!(fig.width, 10);
        assert_eq!(fig.height, 3 * 65 + 4);
    }
}
