//! Dataset ingestion: manifest parsing, image/depth codecs, padding to the
//! model input size, synthetic scene generation, and false-color rendering.
//!
//! A manifest is line-oriented text. The first data line declares the
//! meters-per-unit scale of every 16-bit depth file it references:
//!
//! ```text
//! scale=0.001
//! images/a.png<TAB>depth/a.png<TAB>3
//! images/b.png<TAB>depth/b.png
//! ```
//!
//! Blank lines and `#` comments are skipped. Depth value 0 marks an invalid
//! pixel and is excluded from losses and metrics.

use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One aligned RGB + depth pair, already resized/padded to the model input.
#[derive(Debug, Clone)]
pub struct SamplePair {
    /// `3 x H x W`, values in [0, 1].
    pub rgb: Tensor,
    /// `H * W` meters, row-major; 0 marks invalid.
    pub depth_gt: Vec<f64>,
    pub valid: Vec<bool>,
    pub scene_label: Option<usize>,
    pub rgb_path: PathBuf,
    pub depth_path: PathBuf,
    /// Content region before padding (height, width), for unpadding output.
    pub content: (usize, usize),
    /// Original on-disk image dims, for restoring full-size predictions.
    pub original: (usize, usize),
}

/// 16-bit grayscale depth codec: meters stored as `round(d / scale)` units,
/// clamped to u16; a one-line sidecar `<path>.scale` records the scale.
pub fn write_depth(depth: &[f64], h: usize, w: usize, path: &Path, scale: f64) -> Result<()> {
    if scale <= 0.0 {
        return Err(Error::Param(format!("depth scale must be positive, got {scale}")));
    }
    if depth.len() != h * w {
        return Err(Error::Shape(format!(
            "depth buffer {} does not match {h}x{w}",
            depth.len()
        )));
    }
    let mut img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let units = (depth[i] / scale).round().clamp(0.0, 65535.0);
        *px = Luma([units as u16]);
    }
    img.save(path)
        .map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))?;
    std::fs::write(sidecar_path(path), format!("scale={scale}\n"))
        .map_err(|e| Error::Io(format!("writing scale sidecar for {}: {e}", path.display())))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".scale");
    PathBuf::from(os)
}

/// Read a 16-bit depth file back to meters with its scale.
pub fn read_depth(path: &Path, scale: f64) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
    let gray = img.into_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let depth = gray.pixels().map(|p| p.0[0] as f64 * scale).collect();
    Ok((depth, h, w))
}

/// Write an RGB tensor (`3 x H x W` in [0, 1]) as an 8-bit PNG.
pub fn write_rgb(rgb: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = (rgb.shape()[0], rgb.shape()[1], rgb.shape()[2]);
    if c != 3 {
        return Err(Error::Shape("write_rgb expects 3 channels".into()));
    }
    let mut img: RgbImage = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| (rgb.data()[(ch * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path)
        .map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))
}

fn read_rgb(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
    let rgb = img.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * h + y as usize) * w + x as usize] = px.0[ch] as f64 / 255.0;
        }
    }
    Ok((data, h, w))
}

/// Fixed warm-to-cool color ramp for depth visualization.
const RAMP: [[u8; 3]; 5] = [
    [230, 40, 20],   // near: warm red
    [250, 170, 30],  // orange
    [240, 240, 90],  // yellow
    [80, 200, 170],  // teal
    [40, 60, 230],   // far: cool blue
];

/// Map metric depth through the ramp over [d_min, d_max]; out-of-range
/// values clamp to the endpoints.
pub fn colorize(depth: &[f64], h: usize, w: usize, d_min: f64, d_max: f64) -> Result<RgbImage> {
    if depth.len() != h * w {
        return Err(Error::Shape("colorize buffer size".into()));
    }
    if !(d_min < d_max) {
        return Err(Error::Param("colorize needs d_min < d_max".into()));
    }
    let mut img: RgbImage = ImageBuffer::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let t = ((depth[i] - d_min) / (d_max - d_min)).clamp(0.0, 1.0);
        let pos = t * (RAMP.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(RAMP.len() - 1);
        let f = pos - lo as f64;
        let mix = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * f).round() as u8;
        *px = Rgb([
            mix(RAMP[lo][0], RAMP[hi][0]),
            mix(RAMP[lo][1], RAMP[hi][1]),
            mix(RAMP[lo][2], RAMP[hi][2]),
        ]);
    }
    Ok(img)
}

/// Endpoint colors of the ramp (near, far) for tests and legends.
pub fn ramp_endpoints() -> ([u8; 3], [u8; 3]) {
    (RAMP[0], RAMP[RAMP.len() - 1])
}

struct ManifestRow {
    rgb: PathBuf,
    depth: PathBuf,
    label: Option<usize>,
    line_no: usize,
}

fn parse_manifest(path: &Path) -> Result<(f64, Vec<ManifestRow>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("reading manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut scale: Option<f64> = None;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if scale.is_none() {
            let rest = line.strip_prefix("scale=").ok_or_else(|| {
                Error::Format(format!(
                    "manifest {} line {line_no}: expected scale=<meters-per-unit> header",
                    path.display()
                ))
            })?;
            let s: f64 = rest
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad scale value {rest:?} on line {line_no}")))?;
            if s <= 0.0 {
                return Err(Error::Format(format!("scale must be positive, got {s}")));
            }
            scale = Some(s);
            continue;
        }
        let mut parts = line.split('\t');
        let rgb = parts
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Format(format!("line {line_no}: missing rgb path")))?;
        let depth = parts
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Format(format!("line {line_no}: missing depth path")))?;
        let label = match parts.next() {
            Some(s) if !s.trim().is_empty() => Some(s.trim().parse::<usize>().map_err(|_| {
                Error::Format(format!("line {line_no}: bad scene label {s:?}"))
            })?),
            _ => None,
        };
        rows.push(ManifestRow {
            rgb: base.join(rgb),
            depth: base.join(depth),
            label,
            line_no,
        });
    }
    let scale = scale.ok_or_else(|| {
        Error::Format(format!("manifest {} has no scale header", path.display()))
    })?;
    Ok((scale, rows))
}

fn resize_bilinear_rgb(data: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * nh * nw];
    for ch in 0..3 {
        for oy in 0..nh {
            let sy = ((oy as f64 + 0.5) * h as f64 / nh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..nw {
                let sx =
                    ((ox as f64 + 0.5) * w as f64 / nw as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let v = data[(ch * h + y0) * w + x0] * (1.0 - fy) * (1.0 - fx)
                    + data[(ch * h + y0) * w + x1] * (1.0 - fy) * fx
                    + data[(ch * h + y1) * w + x0] * fy * (1.0 - fx)
                    + data[(ch * h + y1) * w + x1] * fy * fx;
                out[(ch * nh + oy) * nw + ox] = v;
            }
        }
    }
    out
}

/// Nearest-neighbor depth resize; interpolating across occlusion edges would
/// fabricate geometry.
fn resize_nearest_depth(data: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let mut out = vec![0.0; nh * nw];
    for oy in 0..nh {
        let sy = (((oy as f64 + 0.5) * h as f64 / nh as f64 - 0.5).round().max(0.0) as usize)
            .min(h - 1);
        for ox in 0..nw {
            let sx = (((ox as f64 + 0.5) * w as f64 / nw as f64 - 0.5).round().max(0.0) as usize)
                .min(w - 1);
            out[oy * nw + ox] = data[sy * w + sx];
        }
    }
    out
}

/// Ingest a manifest: decode, scale to meters, resize preserving aspect to
/// fit the model input, and zero-pad bottom/right (padding is invalid).
pub fn ingest_dataset(manifest: &Path, cfg: &ModelConfig) -> Result<Vec<SamplePair>> {
    let (scale, rows) = parse_manifest(manifest)?;
    let (th, tw) = (cfg.input_height, cfg.input_width);
    let mut samples = Vec::with_capacity(rows.len());
    for row in rows {
        let (rgb_raw, ih, iw) = read_rgb(&row.rgb).map_err(|e| {
            Error::Io(format!("manifest line {}: {e}", row.line_no))
        })?;
        let (depth_raw, dh, dw) = read_depth(&row.depth, scale).map_err(|e| {
            Error::Io(format!("manifest line {}: {e}", row.line_no))
        })?;
        if (dh, dw) != (ih, iw) {
            return Err(Error::Format(format!(
                "manifest line {}: rgb {}x{} vs depth {}x{}",
                row.line_no, ih, iw, dh, dw
            )));
        }
        // Scale to fit inside (th, tw), preserving aspect.
        let ratio = (th as f64 / ih as f64).min(tw as f64 / iw as f64);
        let ch = ((ih as f64 * ratio).round() as usize).clamp(1, th);
        let cw = ((iw as f64 * ratio).round() as usize).clamp(1, tw);
        let rgb_s = resize_bilinear_rgb(&rgb_raw, ih, iw, ch, cw);
        let depth_s = resize_nearest_depth(&depth_raw, ih, iw, ch, cw);

        let mut rgb = vec![0.0; 3 * th * tw];
        let mut depth = vec![0.0; th * tw];
        for chn in 0..3 {
            for y in 0..ch {
                for x in 0..cw {
                    rgb[(chn * th + y) * tw + x] = rgb_s[(chn * ch + y) * cw + x];
                }
            }
        }
        for y in 0..ch {
            for x in 0..cw {
                depth[y * tw + x] = depth_s[y * cw + x];
            }
        }
        let valid = depth.iter().map(|d| *d > 0.0).collect();
        samples.push(SamplePair {
            rgb: Tensor::from_vec(vec![3, th, tw], rgb)?,
            depth_gt: depth,
            valid,
            scene_label: row.label,
            rgb_path: row.rgb,
            depth_path: row.depth,
            content: (ch, cw),
            original: (ih, iw),
        });
    }
    Ok(samples)
}

/// Deterministically render `n` synthetic scenes (a depth-gradient backdrop
/// plus a floating rectangle whose color encodes its depth) into `dir`, and
/// write a manifest referencing them. Returns the manifest path.
pub fn generate_synthetic(
    dir: &Path,
    n: usize,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::Param("need at least one synthetic sample".into()));
    }
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Io(format!("creating {}: {e}", dir.display())))?;
    let (h, w) = (cfg.input_height, cfg.input_width);
    let scale = 0.001;
    let mut rng = Rng::new(seed);
    let mut manifest = String::from("scale=0.001\n");
    let (d_lo, d_hi) = (
        cfg.mpsp.d_min + 0.2 * (cfg.mpsp.d_max - cfg.mpsp.d_min),
        cfg.mpsp.d_min + 0.8 * (cfg.mpsp.d_max - cfg.mpsp.d_min),
    );
    for i in 0..n {
        let near = rng.range(d_lo, d_lo + 0.25 * (d_hi - d_lo));
        let far = rng.range(d_hi - 0.25 * (d_hi - d_lo), d_hi);
        let vertical = rng.uniform() < 0.5;
        let mut depth = vec![0.0; h * w];
        let mut rgb = Tensor::zeros(vec![3, h, w]);
        let span = cfg.mpsp.d_max - cfg.mpsp.d_min;
        for y in 0..h {
            for x in 0..w {
                let t = if vertical {
                    y as f64 / (h - 1) as f64
                } else {
                    x as f64 / (w - 1) as f64
                };
                let d = near + (far - near) * t;
                depth[y * w + x] = d;
                // Color carries the depth cue: red encodes nearness, blue
                // distance, green the gradient axis.
                let dn = (d - cfg.mpsp.d_min) / span;
                rgb.data_mut()[y * w + x] = 1.0 - dn;
                rgb.data_mut()[(h + y) * w + x] = if vertical { 0.25 } else { 0.75 };
                rgb.data_mut()[(2 * h + y) * w + x] = dn;
            }
        }
        if i % 4 != 3 {
            // One axis-aligned rectangle at constant depth.
            let rh = 6 + rng.below(h / 6);
            let rw = 6 + rng.below(w / 6);
            let ry = rng.below(h - rh);
            let rx = rng.below(w - rw);
            let rd = rng.range(d_lo, d_hi);
            let dn = (rd - cfg.mpsp.d_min) / span;
            for y in ry..ry + rh {
                for x in rx..rx + rw {
                    depth[y * w + x] = rd;
                    rgb.data_mut()[y * w + x] = 1.0 - dn;
                    rgb.data_mut()[(h + y) * w + x] = 0.5;
                    rgb.data_mut()[(2 * h + y) * w + x] = dn;
                }
            }
        }
        let rgb_name = format!("rgb_{i:03}.png");
        let depth_name = format!("depth_{i:03}.png");
        write_rgb(&rgb, &dir.join(&rgb_name))?;
        write_depth(&depth, h, w, &dir.join(&depth_name), scale)?;
        let label = i % cfg.mpsp.n_classes;
        manifest.push_str(&format!("{rgb_name}\t{depth_name}\t{label}\n"));
    }
    let manifest_path = dir.join("manifest.tsv");
    std::fs::write(&manifest_path, manifest)
        .map_err(|e| Error::Io(format!("writing manifest: {e}")))?;
    Ok(manifest_path)
}

/// Restore a padded model-resolution depth map to the sample's original
/// dimensions: crop the content region, then bilinear-resize.
pub fn unpad_depth(depth: &[f64], cfg: &ModelConfig, sample: &SamplePair) -> Vec<f64> {
    let (th, tw) = (cfg.input_height, cfg.input_width);
    let (ch, cw) = sample.content;
    let mut cropped = vec![0.0; ch * cw];
    for y in 0..ch {
        cropped[y * cw..(y + 1) * cw].copy_from_slice(&depth[y * tw..y * tw + cw]);
    }
    let (oh, ow) = sample.original;
    if (oh, ow) == (ch, cw) {
        return cropped;
    }
    // Depth output is smooth (upsampled probabilities), bilinear is fine.
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let sy = ((oy as f64 + 0.5) * ch as f64 / oh as f64 - 0.5).clamp(0.0, (ch - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(ch - 1);
        let fy = sy - y0 as f64;
        for ox in 0..ow {
            let sx = ((ox as f64 + 0.5) * cw as f64 / ow as f64 - 0.5).clamp(0.0, (cw - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(cw - 1);
            let fx = sx - x0 as f64;
            out[oy * ow + ox] = cropped[y0 * cw + x0] * (1.0 - fy) * (1.0 - fx)
                + cropped[y0 * cw + x1] * (1.0 - fy) * fx
                + cropped[y1 * cw + x0] * fy * (1.0 - fx)
                + cropped[y1 * cw + x1] * fy * fx;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn depth_codec_round_trip_within_half_unit() {
        let dir = tmpdir();
        let path = dir.path().join("d.png");
        let scale = 0.001;
        let mut rng = Rng::new(81);
        let depth: Vec<f64> = (0..64).map(|_| rng.range(0.1, 9.9)).collect();
        write_depth(&depth, 8, 8, &path, scale).unwrap();
        let (back, h, w) = read_depth(&path, scale).unwrap();
        assert_eq!((h, w), (8, 8));
        for (a, b) in depth.iter().zip(&back) {
            assert!((a - b).abs() <= scale / 2.0 + 1e-12);
        }
        // Sidecar records the scale.
        let sidecar = std::fs::read_to_string(dir.path().join("d.png.scale")).unwrap();
        assert_eq!(sidecar.trim(), "scale=0.001");
    }

    #[test]
    fn unit_conversion_and_clamp() {
        let dir = tmpdir();
        let path = dir.path().join("d.png");
        write_depth(&[1.0, 100.0], 1, 2, &path, 0.001).unwrap();
        let (back, _, _) = read_depth(&path, 0.001).unwrap();
        assert!((back[0] - 1.0).abs() < 1e-9); // 1000 units
        assert!((back[1] - 65.535).abs() < 1e-9); // clamped at 65535
    }

    #[test]
    fn colorize_hits_ramp_endpoints() {
        let img = colorize(&[0.1, 10.0, 5.05, -3.0, 42.0], 1, 5, 0.1, 10.0).unwrap();
        let (near, far) = ramp_endpoints();
        assert_eq!(img.get_pixel(0, 0).0, near);
        assert_eq!(img.get_pixel(1, 0).0, far);
        assert_eq!(img.get_pixel(3, 0).0, near); // clamped below
        assert_eq!(img.get_pixel(4, 0).0, far); // clamped above
    }

    #[test]
    fn manifest_ingestion_and_padding() {
        let dir = tmpdir();
        let cfg = ModelConfig::lmdepth();
        // 48x32 image: scales to 64x43, pads right to 64.
        let mut rgb = Tensor::zeros(vec![3, 48, 32]);
        rgb.data_mut().fill(0.5);
        write_rgb(&rgb, &dir.path().join("a.png")).unwrap();
        let depth: Vec<f64> = (0..48 * 32).map(|i| 1.0 + (i % 7) as f64).collect();
        write_depth(&depth, 48, 32, &dir.path().join("d.png"), 0.001).unwrap();
        std::fs::write(
            dir.path().join("m.tsv"),
            "# comment\nscale=0.001\na.png\td.png\t3\n",
        )
        .unwrap();
        let samples = ingest_dataset(&dir.path().join("m.tsv"), &cfg).unwrap();
        assert_eq!(samples.len(), 1);
        let s = &samples[0];
        assert_eq!(s.rgb.shape(), &[3, 64, 64]);
        assert_eq!(s.scene_label, Some(3));
        assert_eq!(s.content, (64, 43));
        assert_eq!(s.original, (48, 32));
        // Padded region is invalid.
        assert!(!s.valid[63 * 64 + 60]);
        assert!(s.valid[0]);
        // Depth pixel 1000 units at scale 0.001 is 1 meter.
        assert!((s.depth_gt[0] - depth[0]).abs() <= 0.001);
    }

    #[test]
    fn zero_depth_is_invalid_sentinel() {
        let dir = tmpdir();
        let mut cfg = ModelConfig::lmdepth();
        cfg.input_height = 32;
        cfg.input_width = 32;
        let rgb = Tensor::zeros(vec![3, 32, 32]);
        write_rgb(&rgb, &dir.path().join("a.png")).unwrap();
        let mut depth = vec![2.0; 32 * 32];
        depth[5] = 0.0;
        write_depth(&depth, 32, 32, &dir.path().join("d.png"), 0.001).unwrap();
        std::fs::write(dir.path().join("m.tsv"), "scale=0.001\na.png\td.png\n").unwrap();
        let samples = ingest_dataset(&dir.path().join("m.tsv"), &cfg).unwrap();
        assert!(!samples[0].valid[5]);
        assert!(samples[0].valid[4]);
        assert_eq!(samples[0].scene_label, None);
    }

    #[test]
    fn missing_file_names_the_line() {
        let dir = tmpdir();
        std::fs::write(dir.path().join("m.tsv"), "scale=0.001\nnope.png\talso.png\n").unwrap();
        let err = ingest_dataset(&dir.path().join("m.tsv"), &ModelConfig::lmdepth()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn missing_scale_header_is_format_error() {
        let dir = tmpdir();
        std::fs::write(dir.path().join("m.tsv"), "a.png\tb.png\n").unwrap();
        let err = ingest_dataset(&dir.path().join("m.tsv"), &ModelConfig::lmdepth()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let cfg = ModelConfig::lmdepth();
        let d1 = tmpdir();
        let d2 = tmpdir();
        let m1 = generate_synthetic(d1.path(), 3, &cfg, 9).unwrap();
        let m2 = generate_synthetic(d2.path(), 3, &cfg, 9).unwrap();
        let s1 = ingest_dataset(&m1, &cfg).unwrap();
        let s2 = ingest_dataset(&m2, &cfg).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(a.rgb.data(), b.rgb.data());
            assert_eq!(a.depth_gt, b.depth_gt);
            assert_eq!(a.scene_label, b.scene_label);
        }
        // Depth values live inside the configured range and are all valid.
        for s in &s1 {
            assert!(s.valid.iter().all(|v| *v));
            for d in &s.depth_gt {
                assert!(*d > cfg.mpsp.d_min && *d < cfg.mpsp.d_max);
            }
        }
    }

    #[test]
    fn unpad_restores_original_dims() {
        let dir = tmpdir();
        let cfg = ModelConfig::lmdepth();
        let rgb = Tensor::zeros(vec![3, 48, 32]);
        write_rgb(&rgb, &dir.path().join("a.png")).unwrap();
        write_depth(&vec![1.0; 48 * 32], 48, 32, &dir.path().join("d.png"), 0.001).unwrap();
        std::fs::write(dir.path().join("m.tsv"), "scale=0.001\na.png\td.png\n").unwrap();
        let samples = ingest_dataset(&dir.path().join("m.tsv"), &cfg).unwrap();
        let fake_pred = vec![2.5; 64 * 64];
        let restored = unpad_depth(&fake_pred, &cfg, &samples[0]);
        assert_eq!(restored.len(), 48 * 32);
        assert!(restored.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }
}
