//! Heatmap dumps: per-branch activation maps, erasing saliency and masks,
//! written as binary PPM with a five-stop blue→cyan→green→yellow→red ramp.

use std::path::{Path, PathBuf};

use crate::data::stack_images;
use crate::error::{Error, Result};
use crate::model::{DeepMiner, ForwardTrace};
use crate::nn::Mode;
use crate::tensor::{Tape, Tensor};

/// Binary (P6) PPM writer.
pub fn write_ppm(path: impl AsRef<Path>, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * w * h {
        return Err(Error::ShapeMismatch(format!(
            "ppm buffer {} bytes for {w}x{h}",
            rgb.len()
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    std::fs::write(path, out)?;
    Ok(())
}

/// Binary (P6) PPM reader; used by tests and the viz CLI input path.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| Error::FormatError("ppm header not ascii".into()))?
                .to_string(),
        );
    }
    if fields.len() != 4 || fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::FormatError("unsupported ppm header".into()));
    }
    let w: usize = fields[1]
        .parse()
        .map_err(|_| Error::FormatError("bad ppm width".into()))?;
    let h: usize = fields[2]
        .parse()
        .map_err(|_| Error::FormatError("bad ppm height".into()))?;
    pos += 1; // single whitespace after maxval
    let data = bytes[pos..].to_vec();
    if data.len() != 3 * w * h {
        return Err(Error::FormatError(format!(
            "ppm payload {} bytes for {w}x{h}",
            data.len()
        )));
    }
    Ok((w, h, data))
}

/// Writes a `[3,H,W]` unit-range tensor as a PPM image.
pub fn write_ppm_from_tensor(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "expected [3,H,W], got {:?}",
            image.shape()
        )));
    };
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    let data = image.data();
    let mut rgb = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                rgb[(y * w + x) * 3 + ch] =
                    (data[ch * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    drop(data);
    write_ppm(path, w, h, &rgb)
}

/// Five-stop linear ramp: blue, cyan, green, yellow, red over t in [0,1].
pub fn color_ramp(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 255.0],
        [0.0, 255.0, 255.0],
        [0.0, 255.0, 0.0],
        [255.0, 255.0, 0.0],
        [255.0, 0.0, 0.0],
    ];
    let t = t.clamp(0.0, 1.0) * 4.0;
    let seg = (t.floor() as usize).min(3);
    let local = t - seg as f64;
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        rgb[c] = (STOPS[seg][c] + (STOPS[seg + 1][c] - STOPS[seg][c]) * local).round() as u8;
    }
    rgb
}

fn min_max_01(values: &[f64]) -> Vec<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        values.iter().map(|&v| (v - min) / (max - min)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Nearest-neighbor upsampling of an `mh` x `mw` scalar map to `h` x `w`.
fn upsample(map: &[f64], mh: usize, mw: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let sy = y * mh / h;
        for x in 0..w {
            let sx = x * mw / w;
            out[y * w + x] = map[sy * mw + sx];
        }
    }
    out
}

fn write_heatmap(
    path: &Path,
    map: &[f64],
    mh: usize,
    mw: usize,
    h: usize,
    w: usize,
) -> Result<()> {
    let up = upsample(map, mh, mw, h, w);
    let mut rgb = vec![0u8; 3 * h * w];
    for (i, &v) in up.iter().enumerate() {
        let c = color_ramp(v);
        rgb[i * 3..i * 3 + 3].copy_from_slice(&c);
    }
    write_ppm(path, w, h, &rgb)
}

/// Writes, for one image: a ramp heatmap of every branch's channel-mean
/// final activation (min-max normalized, upsampled to input size), plus each
/// erased branch's normalized saliency map and binary mask.
/// Returns the written paths; count = branches + 2 per erased branch.
pub fn visualize_masks(
    model: &DeepMiner,
    image: &Tensor,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let batch = stack_images([image])?;
    let tape = Tape::no_grad();
    let mut trace = ForwardTrace::default();
    model.forward_traced(&tape, &batch, Mode::Eval, Some(&mut trace))?;
    let (h, w) = (model.cfg().input_h, model.cfg().input_w);
    let mut written = Vec::new();

    for (branch, map) in &trace.final_maps {
        let [_, c, mh, mw] = *map.shape() else { unreachable!() };
        let data = map.data();
        let mut mean = vec![0.0; mh * mw];
        for ch in 0..c {
            for (m, v) in mean.iter_mut().zip(&data[ch * mh * mw..(ch + 1) * mh * mw]) {
                *m += v / c as f64;
            }
        }
        drop(data);
        let norm = min_max_01(&mean);
        let path = out_dir.join(format!("heatmap_{branch}.ppm"));
        write_heatmap(&path, &norm, mh, mw, h, w)?;
        written.push(path);
    }

    for (k, saliency, mask) in &trace.erasures {
        let [_, _, sh, sw] = *saliency.shape() else { unreachable!() };
        let path = out_dir.join(format!("saliency_e{k}.ppm"));
        write_heatmap(&path, &saliency.data(), sh, sw, h, w)?;
        written.push(path);

        let up = upsample(&mask.values.data(), sh, sw, h, w);
        let mut rgb = vec![0u8; 3 * h * w];
        for (i, &v) in up.iter().enumerate() {
            let byte = if v > 0.5 { 255 } else { 0 };
            rgb[i * 3..i * 3 + 3].fill(byte);
        }
        let path = out_dir.join(format!("mask_e{k}.ppm"));
        write_ppm(&path, w, h, &rgb)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    #[test]
    fn ramp_endpoints_and_midpoints() {
        assert_eq!(color_ramp(0.0), [0, 0, 255]);
        assert_eq!(color_ramp(0.25), [0, 255, 255]);
        assert_eq!(color_ramp(0.5), [0, 255, 0]);
        assert_eq!(color_ramp(0.75), [255, 255, 0]);
        assert_eq!(color_ramp(1.0), [255, 0, 0]);
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let rgb: Vec<u8> = (0..3 * 4 * 2).map(|i| (i * 11 % 256) as u8).collect();
        write_ppm(&path, 4, 2, &rgb).unwrap();
        let (w, h, data) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (4, 2));
        assert_eq!(data, rgb);
    }

    fn viz_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::deep_miner(4);
        cfg.block_widths = vec![16, 16, 16, 16];
        cfg.input_h = 16;
        cfg.input_w = 8;
        cfg
    }

    #[test]
    fn file_count_matches_contract() {
        let model = build_model(&viz_cfg(), 3).unwrap();
        let ds = crate::data::synth_dataset(1, 1, 1, 16, 8, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = visualize_masks(&model, &ds.samples[0].image, dir.path()).unwrap();
        // 4 branches + 2 per erased branch (2 of them)
        assert_eq!(files.len(), 4 + 2 * 2);
        for f in &files {
            assert!(f.exists());
        }
    }

    #[test]
    fn constant_map_renders_low_stop() {
        let norm = min_max_01(&[3.0, 3.0, 3.0, 3.0]);
        assert_eq!(norm, vec![0.0; 4]);
        assert_eq!(color_ramp(norm[0]), [0, 0, 255]);
    }

    #[test]
    fn heatmap_argmax_survives_upsampling() {
        let model = build_model(&viz_cfg(), 7).unwrap();
        let ds = crate::data::synth_dataset(1, 1, 1, 16, 8, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        visualize_masks(&model, &ds.samples[0].image, dir.path()).unwrap();

        // recompute the saliency argmax and locate the pure-red pixels in the file
        let tape = Tape::no_grad();
        let mut trace = ForwardTrace::default();
        let batch = crate::data::stack_images([&ds.samples[0].image]).unwrap();
        model
            .forward_traced(&tape, &batch, Mode::Eval, Some(&mut trace))
            .unwrap();
        let (k, saliency, _) = &trace.erasures[0];
        let [_, _, sh, sw] = *saliency.shape() else { unreachable!() };
        let sd = saliency.to_vec();
        let arg = sd
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let (ay, ax) = (arg / sw, arg % sw);

        let (w, h, rgb) = read_ppm(dir.path().join(format!("saliency_e{k}.ppm"))).unwrap();
        let mut red_cells = std::collections::HashSet::new();
        for y in 0..h {
            for x in 0..w {
                if rgb[(y * w + x) * 3..(y * w + x) * 3 + 3] == [255, 0, 0] {
                    red_cells.insert((y * sh / h, x * sw / w));
                }
            }
        }
        assert!(
            red_cells.contains(&(ay, ax)),
            "argmax cell ({ay},{ax}) not rendered at the ramp's top stop"
        );
    }
}
