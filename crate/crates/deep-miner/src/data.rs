//! Datasets: synthetic identity images, directory ingestion under the
//! `<id>_c<cam>...` naming convention, training augmentation, and P×K batch
//! sampling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labeled image: `[3,H,W]` values in [0,1], identity and camera ids.
pub struct Sample {
    pub image: Tensor,
    pub identity: usize,
    pub camera: usize,
    pub source_path: Option<PathBuf>,
}

/// An immutable sample collection with an identity index.
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// identity -> indices into `samples`, in sample order.
    pub id_index: BTreeMap<usize, Vec<usize>>,
    pub h: usize,
    pub w: usize,
}

impl Dataset {
    pub fn from_samples(samples: Vec<Sample>, h: usize, w: usize) -> Self {
        let mut id_index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            id_index.entry(s.identity).or_default().push(i);
        }
        Dataset {
            samples,
            id_index,
            h,
            w,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.id_index.len()
    }

    /// Sorted identity list; its positions define the contiguous class
    /// labels used for classification.
    pub fn identities(&self) -> Vec<usize> {
        self.id_index.keys().copied().collect()
    }

    /// Contiguous class label (0-based) of each sample, by identity rank.
    pub fn class_labels(&self) -> Vec<usize> {
        let ids = self.identities();
        self.samples
            .iter()
            .map(|s| ids.binary_search(&s.identity).expect("indexed identity"))
            .collect()
    }

    /// Splits off the last `holdout` samples of every identity into a second
    /// dataset (train, eval).
    pub fn split_holdout(&self, holdout: usize) -> (Dataset, Dataset) {
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for indices in self.id_index.values() {
            let cut = indices.len().saturating_sub(holdout);
            for (pos, &i) in indices.iter().enumerate() {
                let s = &self.samples[i];
                let copy = Sample {
                    image: s.image.clone(),
                    identity: s.identity,
                    camera: s.camera,
                    source_path: s.source_path.clone(),
                };
                if pos < cut {
                    train.push(copy);
                } else {
                    eval.push(copy);
                }
            }
        }
        (
            Dataset::from_samples(train, self.h, self.w),
            Dataset::from_samples(eval, self.h, self.w),
        )
    }
}

/// Stacks `[3,H,W]` images into one `[N,3,H,W]` batch tensor.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let images: Vec<&Tensor> = images.into_iter().collect();
    if images.is_empty() {
        return Err(Error::InvalidCount("cannot stack zero images".into()));
    }
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in &images {
        if img.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "stack_images: {:?} vs {:?}",
                img.shape(),
                shape
            )));
        }
        data.extend_from_slice(&img.data());
    }
    let mut out_shape = vec![images.len()];
    out_shape.extend(shape);
    Ok(Tensor::from_parts(out_shape, data, false))
}

// ---- synthetic data ---------------------------------------------------------

struct Rect {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    color: [f64; 3],
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Deterministic synthetic identities: each identity is a signature of three
/// colored rectangles, one per horizontal band, with golden-ratio-spaced hues
/// so identities stay far apart in pixel space. Each sample composites the
/// signature over uniform background noise with brightness scaling and
/// spatial jitter. Cameras are assigned round-robin.
pub fn synth_dataset(
    num_ids: usize,
    per_id: usize,
    num_cams: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_ids == 0 || per_id == 0 || num_cams == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidCount(format!(
            "synth_dataset({num_ids}, {per_id}, {num_cams}, {h}, {w}) needs all counts >= 1"
        )));
    }
    let mut offset_rng = stream_rng(seed, 999);
    let hue_offset = offset_rng.gen_range(0.0..1.0);
    let mut samples = Vec::with_capacity(num_ids * per_id);
    for id in 0..num_ids {
        let mut sig_rng = stream_rng(seed, 1_000 + id as u64);
        let base_hue = (id as f64 * 0.618_033_988_749_895 + hue_offset).fract();
        // per-identity band geometry: seeded split points give each identity
        // its own brightness-invariant vertical layout
        let cut_a = sig_rng.gen_range(0.2..0.45);
        let cut_b = sig_rng.gen_range(0.55..0.8);
        let bounds = [(0.02, cut_a), (cut_a, cut_b), (cut_b, 0.98)];
        let rects: Vec<Rect> = (0..3)
            .map(|band| {
                let (y0, y1) = bounds[band];
                Rect {
                    x: sig_rng.gen_range(0.0..0.2),
                    y: y0,
                    w: sig_rng.gen_range(0.65..0.95),
                    h: (y1 - y0) * sig_rng.gen_range(0.8..0.95),
                    color: hsv_to_rgb(
                        base_hue + (band as f64 - 1.0) * 0.04,
                        0.95,
                        [0.85, 1.0, 0.7][band],
                    ),
                }
            })
            .collect();
        for s in 0..per_id {
            let mut rng = stream_rng(seed, 1_000_000 + (id * per_id + s) as u64);
            let mut pixels = vec![0.0; 3 * h * w];
            // background noise, uniform amplitude 0.2
            for v in pixels.iter_mut() {
                *v = rng.gen_range(0.0..0.2);
            }
            let dx = rng.gen_range(-0.1..0.1) * w as f64;
            let dy = rng.gen_range(-0.1..0.1) * h as f64;
            let brightness = rng.gen_range(0.8..1.2);
            for rect in &rects {
                let x0 = ((rect.x * w as f64 + dx).round().max(0.0)) as usize;
                let y0 = ((rect.y * h as f64 + dy).round().max(0.0)) as usize;
                let x1 = (((rect.x + rect.w) * w as f64 + dx).round().max(0.0) as usize).min(w);
                let y1 = (((rect.y + rect.h) * h as f64 + dy).round().max(0.0) as usize).min(h);
                for c in 0..3 {
                    for y in y0..y1 {
                        for x in x0..x1 {
                            pixels[c * h * w + y * w + x] = rect.color[c];
                        }
                    }
                }
            }
            for v in pixels.iter_mut() {
                *v = (*v * brightness).clamp(0.0, 1.0);
            }
            samples.push(Sample {
                image: Tensor::from_parts(vec![3, h, w], pixels, false),
                identity: id,
                camera: 1 + (s % num_cams),
                source_path: None,
            });
        }
    }
    Ok(Dataset::from_samples(samples, h, w))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---- directory ingestion ------------------------------------------------------

/// Ingestion outcome: the dataset plus per-file decode problems (non-fatal
/// unless nothing decoded).
pub struct LoadReport {
    pub dataset: Dataset,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Loads every file matching `<id>_c<cam>...` from a directory, decoding and
/// nearest-neighbor resizing to `h` x `w`. Files with identity -1 (the
/// distractor convention) and non-matching names are ignored.
pub fn load_dir(path: impl AsRef<Path>, h: usize, w: usize) -> Result<LoadReport> {
    let path = path.as_ref();
    let pattern = Regex::new(r"^(-?\d+)_c(\d+)").expect("static regex");
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort();

    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for file in entries {
        let Some(name) = file.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(caps) = pattern.captures(name) else {
            continue;
        };
        let id: i64 = caps[1].parse().unwrap_or(-1);
        if id < 0 {
            continue; // distractor images
        }
        let camera: usize = match caps[2].parse() {
            Ok(c) if c >= 1 => c,
            _ => {
                skipped.push((file.clone(), "camera id must be >= 1".into()));
                continue;
            }
        };
        match decode_image(&file, h, w) {
            Ok(image) => samples.push(Sample {
                image,
                identity: id as usize,
                camera,
                source_path: Some(file),
            }),
            Err(e) => skipped.push((file, e.to_string())),
        }
    }
    if samples.is_empty() {
        return Err(Error::NoValidFiles(path.display().to_string()));
    }
    Ok(LoadReport {
        dataset: Dataset::from_samples(samples, h, w),
        skipped,
    })
}

/// Decodes one image file (PNG/JPEG/PPM/BMP) into `[3,h,w]` unit-range
/// values, nearest-neighbor resized.
pub fn load_image(path: impl AsRef<Path>, h: usize, w: usize) -> Result<Tensor> {
    decode_image(path.as_ref(), h, w)
}

fn decode_image(path: &Path, h: usize, w: usize) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::FormatError(format!("decode {}: {e}", path.display())))?
        .to_rgb8();
    let resized = image::imageops::resize(
        &img,
        w as u32,
        h as u32,
        image::imageops::FilterType::Nearest,
    );
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, pixel) in resized.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = pixel.0[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::from_parts(vec![3, h, w], data, false))
}

// ---- augmentation ----------------------------------------------------------------

/// Random horizontal flip and random erasing, drawn from the supplied RNG
/// stream so a training run replays exactly.
pub fn augment(image: &Tensor, flip_p: f64, erase_p: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let [c, h, w] = *image.shape() else {
        panic!("augment expects [3,H,W], got {:?}", image.shape());
    };
    let mut data = image.to_vec();
    if rng.gen_range(0.0..1.0) < flip_p {
        for ch in 0..c {
            for y in 0..h {
                let row = &mut data[ch * h * w + y * w..ch * h * w + (y + 1) * w];
                row.reverse();
            }
        }
    }
    if rng.gen_range(0.0..1.0) < erase_p {
        let area = rng.gen_range(0.02..0.2) * (h * w) as f64;
        let aspect = rng.gen_range(0.3..3.3);
        let eh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
        let ew = ((area / aspect).sqrt().round() as usize).clamp(1, w);
        let y0 = rng.gen_range(0..=h - eh);
        let x0 = rng.gen_range(0..=w - ew);
        for ch in 0..c {
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    data[ch * h * w + y * w + x] = rng.gen_range(0.0..1.0);
                }
            }
        }
    }
    Tensor::from_parts(image.shape().to_vec(), data, false)
}

// ---- P x K sampling -------------------------------------------------------------

/// One mini-batch: dataset sample indices and their contiguous class labels.
pub struct Batch {
    pub sample_indices: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Yields epochs of P×K batches: P distinct identities, K samples each
/// (drawn with replacement when an identity has fewer than K). An epoch
/// covers every identity at least once.
pub struct PkSampler {
    /// (class label, sample indices) per identity.
    groups: Vec<(usize, Vec<usize>)>,
    p: usize,
    k: usize,
    rng: ChaCha8Rng,
}

impl PkSampler {
    pub fn new(ds: &Dataset, p: usize, k: usize, seed: u64) -> Result<Self> {
        if p < 2 || k < 2 {
            return Err(Error::InvalidHyperparam(format!(
                "P={p}, K={k}: both must be >= 2"
            )));
        }
        if ds.num_identities() < p {
            return Err(Error::TooFewIdentities {
                need: p,
                have: ds.num_identities(),
            });
        }
        let groups = ds
            .id_index
            .values()
            .enumerate()
            .map(|(label, indices)| (label, indices.clone()))
            .collect();
        Ok(PkSampler {
            groups,
            p,
            k,
            rng: stream_rng(seed, 7),
        })
    }

    /// The batches of one epoch, advancing the sampler's RNG state.
    pub fn epoch(&mut self) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        order.shuffle(&mut self.rng);
        let mut batches = Vec::new();
        let mut cursor = 0;
        while cursor < order.len() {
            let mut chosen: Vec<usize> = order[cursor..(cursor + self.p).min(order.len())].to_vec();
            cursor += self.p;
            // a short tail borrows from the epoch's head; all ids distinct
            let mut fill = 0;
            while chosen.len() < self.p {
                chosen.push(order[fill]);
                fill += 1;
            }
            let mut sample_indices = Vec::with_capacity(self.p * self.k);
            let mut labels = Vec::with_capacity(self.p * self.k);
            for &g in &chosen {
                let (label, ref indices) = self.groups[g];
                let mut pool = indices.clone();
                pool.shuffle(&mut self.rng);
                for i in 0..self.k {
                    let idx = if i < pool.len() {
                        pool[i]
                    } else {
                        // with replacement when the identity is short on samples
                        pool[self.rng.gen_range(0..pool.len())]
                    };
                    sample_indices.push(idx);
                    labels.push(label);
                }
            }
            batches.push(Batch {
                sample_indices,
                labels,
            });
        }
        batches
    }
}

/// Dumps every sample as `<id>_c<cam>_<n>.ppm` for inspection.
pub fn dump_ppm(ds: &Dataset, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut counters: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for s in &ds.samples {
        let n = counters.entry((s.identity, s.camera)).or_insert(0);
        let path = dir.join(format!("{:04}_c{}_{}.ppm", s.identity, s.camera, n));
        *n += 1;
        crate::viz::write_ppm_from_tensor(&s.image, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic() {
        let a = synth_dataset(2, 3, 2, 12, 8, 42).unwrap();
        let b = synth_dataset(2, 3, 2, 12, 8, 42).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image.to_vec(), y.image.to_vec());
            assert_eq!((x.identity, x.camera), (y.identity, y.camera));
        }
        let c = synth_dataset(2, 3, 2, 12, 8, 43).unwrap();
        assert_ne!(a.samples[0].image.to_vec(), c.samples[0].image.to_vec());
    }

    #[test]
    fn synth_structure() {
        let ds = synth_dataset(2, 3, 2, 8, 8, 1).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.id_index[&0], vec![0, 1, 2]);
        assert_eq!(ds.id_index[&1], vec![3, 4, 5]);
        // round-robin cameras, 1-based
        assert_eq!(
            ds.samples.iter().map(|s| s.camera).collect::<Vec<_>>(),
            vec![1, 2, 1, 1, 2, 1]
        );
        assert!(matches!(
            synth_dataset(0, 3, 2, 8, 8, 1),
            Err(Error::InvalidCount(_))
        ));
    }

    #[test]
    fn synth_pixels_in_unit_range() {
        let ds = synth_dataset(3, 4, 2, 16, 8, 7).unwrap();
        for s in &ds.samples {
            assert!(s
                .image
                .data()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn synth_identities_are_separable() {
        // mean inter-identity pixel distance must exceed intra-identity
        let ds = synth_dataset(8, 16, 2, 16, 8, 5).unwrap();
        let dist = |a: &Tensor, b: &Tensor| -> f64 {
            a.data()
                .iter()
                .zip(b.data().iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let mut intra = (0.0, 0usize);
        let mut inter = (0.0, 0usize);
        for i in 0..ds.len() {
            for j in (i + 1)..ds.len() {
                let d = dist(&ds.samples[i].image, &ds.samples[j].image);
                if ds.samples[i].identity == ds.samples[j].identity {
                    intra.0 += d;
                    intra.1 += 1;
                } else {
                    inter.0 += d;
                    inter.1 += 1;
                }
            }
        }
        let intra_mean = intra.0 / intra.1 as f64;
        let inter_mean = inter.0 / inter.1 as f64;
        assert!(
            inter_mean > intra_mean,
            "inter {inter_mean} vs intra {intra_mean}"
        );
    }

    #[test]
    fn augment_identity_when_disabled() {
        let ds = synth_dataset(1, 1, 1, 8, 6, 3).unwrap();
        let mut rng = stream_rng(0, 0);
        let out = augment(&ds.samples[0].image, 0.0, 0.0, &mut rng);
        assert_eq!(out.to_vec(), ds.samples[0].image.to_vec());
    }

    #[test]
    fn forced_flip_is_involutive() {
        let ds = synth_dataset(1, 1, 1, 8, 6, 4).unwrap();
        let img = &ds.samples[0].image;
        let mut rng = stream_rng(0, 1);
        let once = augment(img, 1.0, 0.0, &mut rng);
        let twice = augment(&once, 1.0, 0.0, &mut rng);
        assert_ne!(once.to_vec(), img.to_vec());
        assert_eq!(twice.to_vec(), img.to_vec());
    }

    #[test]
    fn forced_erase_touches_one_rectangle() {
        let ds = synth_dataset(1, 1, 1, 16, 12, 5).unwrap();
        let img = &ds.samples[0].image;
        let mut rng = stream_rng(9, 2);
        let out = augment(img, 0.0, 1.0, &mut rng);
        // bounding box of changed pixels must be a full rectangle across channels
        let (h, w) = (16usize, 12usize);
        let a = img.to_vec();
        let b = out.to_vec();
        let mut ys = Vec::new();
        let mut xs = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if (0..3).any(|c| a[c * h * w + y * w + x] != b[c * h * w + y * w + x]) {
                    ys.push(y);
                    xs.push(x);
                }
            }
        }
        assert!(!ys.is_empty(), "erase changed nothing");
        let (y0, y1) = (*ys.iter().min().unwrap(), *ys.iter().max().unwrap());
        let (x0, x1) = (*xs.iter().min().unwrap(), *xs.iter().max().unwrap());
        // every changed pixel lies in the box, and the box area matches count
        assert_eq!(ys.len(), (y1 - y0 + 1) * (x1 - x0 + 1));
    }

    #[test]
    fn pk_sampler_contract() {
        let ds = synth_dataset(8, 6, 2, 8, 8, 11).unwrap();
        let mut sampler = PkSampler::new(&ds, 4, 2, 1).unwrap();
        for _ in 0..3 {
            let batches = sampler.epoch();
            assert_eq!(batches.len(), 2);
            let mut seen_ids = std::collections::HashSet::new();
            for batch in &batches {
                assert_eq!(batch.sample_indices.len(), 8);
                let mut counts = std::collections::HashMap::new();
                for &l in &batch.labels {
                    *counts.entry(l).or_insert(0) += 1;
                }
                assert_eq!(counts.len(), 4, "4 distinct identities per batch");
                assert!(counts.values().all(|&c| c == 2), "K=2 samples each");
                seen_ids.extend(counts.keys().copied());
            }
            assert_eq!(seen_ids.len(), 8, "epoch covers every identity");
        }
    }

    #[test]
    fn pk_sampler_deterministic() {
        let ds = synth_dataset(6, 4, 2, 8, 8, 13).unwrap();
        let collect = |seed: u64| -> Vec<Vec<usize>> {
            let mut s = PkSampler::new(&ds, 3, 2, seed).unwrap();
            (0..2)
                .flat_map(|_| s.epoch())
                .map(|b| b.sample_indices)
                .collect()
        };
        assert_eq!(collect(5), collect(5));
        assert_ne!(collect(5), collect(6));
    }

    #[test]
    fn pk_sampler_too_few_identities() {
        let ds = synth_dataset(3, 4, 2, 8, 8, 17).unwrap();
        assert!(matches!(
            PkSampler::new(&ds, 4, 2, 0),
            Err(Error::TooFewIdentities { need: 4, have: 3 })
        ));
    }

    #[test]
    fn batches_satisfy_triplet_preconditions() {
        let ds = synth_dataset(5, 3, 2, 8, 8, 19).unwrap();
        let mut sampler = PkSampler::new(&ds, 2, 4, 3).unwrap();
        for batch in sampler.epoch() {
            let mut counts = std::collections::HashMap::new();
            for &l in &batch.labels {
                *counts.entry(l).or_insert(0usize) += 1;
            }
            assert!(counts.len() >= 2);
            assert!(counts.values().all(|&c| c == 4));
        }
    }

    #[test]
    fn split_holdout_partitions_per_identity() {
        let ds = synth_dataset(4, 6, 2, 8, 8, 23).unwrap();
        let (train, eval) = ds.split_holdout(2);
        assert_eq!(train.len(), 16);
        assert_eq!(eval.len(), 8);
        for id in 0..4 {
            assert_eq!(train.id_index[&id].len(), 4);
            assert_eq!(eval.id_index[&id].len(), 2);
        }
    }

    #[test]
    fn load_dir_parses_convention() {
        let dir = tempfile::tempdir().unwrap();
        // tiny 2x2 PNGs via the image crate
        let mk = |name: &str| {
            let img = image::RgbImage::from_fn(2, 2, |x, y| {
                image::Rgb([(x * 100) as u8, (y * 100) as u8, 40])
            });
            img.save(dir.path().join(name)).unwrap();
        };
        mk("0002_c1s1_000451_03.png");
        mk("0010_c2s1_000500_00.png");
        mk("-1_c1s1_000600_00.png"); // distractor, skipped
        std::fs::write(dir.path().join("notes.txt"), "not an image").unwrap();

        let report = load_dir(dir.path(), 8, 4).unwrap();
        assert_eq!(report.dataset.len(), 2);
        assert_eq!(report.dataset.samples[0].identity, 2);
        assert_eq!(report.dataset.samples[0].camera, 1);
        assert_eq!(report.dataset.samples[1].identity, 10);
        assert_eq!(report.dataset.samples[1].camera, 2);
        assert_eq!(report.dataset.samples[0].image.shape(), &[3, 8, 4]);
        assert!(report.skipped.is_empty());
    }

    #[test]
    fn load_dir_empty_and_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dir(dir.path(), 8, 4),
            Err(Error::NoValidFiles(_))
        ));

        std::fs::write(dir.path().join("0001_c1_bad.png"), b"not a png").unwrap();
        assert!(matches!(
            load_dir(dir.path(), 8, 4),
            Err(Error::NoValidFiles(_))
        ));

        // one good file alongside the corrupt one: non-fatal, reported
        let img = image::RgbImage::from_fn(2, 2, |_, _| image::Rgb([10, 20, 30]));
        img.save(dir.path().join("0001_c1s1_000451_03.png")).unwrap();
        let report = load_dir(dir.path(), 8, 4).unwrap();
        assert_eq!(report.dataset.len(), 1);
        assert_eq!(report.skipped.len(), 1);
    }
}
