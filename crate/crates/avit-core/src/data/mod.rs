//! Synthetic multi-domain liveness data: generation, few-shot holdout, and
//! the balanced per-domain batch sampler.

pub mod disk;
pub mod probe;

use rand::Rng as _;

use crate::config::{ArtifactKind, DataConfig, DomainSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, standard_normal, stream_rng, Rng, Stream};
use crate::scalar::Scalar;

/// One image with its liveness label (1 = live, 0 = spoof).
/// Pixels are channel-major `[c][y][x]`, values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub pixels: Vec<T>,
    pub label: usize,
}

/// All samples of one domain: the live block first, then the spoof block,
/// paired by index (spoof `i` is live `i` plus the artifact).
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset<T> {
    pub domain_id: String,
    pub image_size: usize,
    pub channels: usize,
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> DomainDataset<T> {
    pub fn class_counts(&self) -> (usize, usize) {
        let live = self.samples.iter().filter(|s| s.label == 1).count();
        (live, self.samples.len() - live)
    }

    pub fn pixels_per_image(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    fn class_indices(&self, label: usize) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].label == label)
            .collect()
    }
}

/// Snaps to the 1/4096 intensity grid. Blob and artifact values are dyadic
/// with few mantissa bits, so live + artifact and the later spoof - live
/// difference are exact in f32 and f64 alike.
fn q12(v: f64) -> f64 {
    (v * 4096.0).round() / 4096.0
}

/// The spoof-minus-live difference injected into spoof images, before the
/// domain transform. Every pattern is (near) zero-mean so it stays linearly
/// separable from per-sample brightness/background jitter, and each value
/// sits on the 1/4096 grid so tests can assert the injection is exact.
/// `phase` offsets the grid sinusoids; Frame and ColorCast ignore it.
pub fn artifact_pattern(
    kind: ArtifactKind,
    image_size: usize,
    channels: usize,
    phase: f64,
) -> Vec<f64> {
    let hw = image_size * image_size;
    let mut art = vec![0.0; channels * hw];
    match kind {
        ArtifactKind::GridCoarse | ArtifactKind::GridFine => {
            let f = if kind == ArtifactKind::GridCoarse { 3.0 } else { 8.0 };
            let amp = 0.25;
            for c in 0..channels {
                for y in 0..image_size {
                    for x in 0..image_size {
                        let sy = (2.0 * std::f64::consts::PI * f * y as f64
                            / image_size as f64
                            + phase)
                            .sin();
                        let sx = (2.0 * std::f64::consts::PI * f * x as f64
                            / image_size as f64
                            + phase)
                            .sin();
                        art[c * hw + y * image_size + x] = q12(amp * sy * sx);
                    }
                }
            }
        }
        ArtifactKind::Frame => {
            let w = 2.min(image_size / 2);
            let border = image_size * image_size - (image_size - 2 * w).pow(2);
            // interior sinks toward a zero-mean plane; capped so the sink
            // can never push a dim background through the zero clamp
            let sink = (-0.25 * border as f64 / (hw - border).max(1) as f64).max(-0.20);
            for c in 0..channels {
                for y in 0..image_size {
                    for x in 0..image_size {
                        let edge = y < w
                            || x < w
                            || y >= image_size - w
                            || x >= image_size - w;
                        art[c * hw + y * image_size + x] =
                            q12(if edge { 0.25 } else { sink });
                    }
                }
            }
        }
        ArtifactKind::ColorCast => {
            // sums to zero across channels, so it is orthogonal to
            // per-sample brightness/background variation
            let cast = [0.22, -0.09, -0.13];
            for c in 0..channels {
                let v = q12(cast[c % 3]);
                art[c * hw..(c + 1) * hw].fill(v);
            }
        }
    }
    art
}

/// Smooth radial blob with per-sample jitter; identical across channels
/// (color variation enters through the domain transform).
fn blob(rng: &mut Rng, image_size: usize, channels: usize) -> Vec<f64> {
    let size = image_size as f64;
    let cx = rng.random_range(0.3..0.7) * size;
    let cy = rng.random_range(0.3..0.7) * size;
    let radius = rng.random_range(0.25..0.45) * size;
    let fg = rng.random_range(0.55..0.72);
    let bg = rng.random_range(0.28..0.42);
    let sigma = radius / 2.0;
    let hw = image_size * image_size;
    let mut img = vec![0.0; channels * hw];
    for y in 0..image_size {
        for x in 0..image_size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let v = q12(bg + (fg - bg) * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
            for c in 0..channels {
                img[c * hw + y * image_size + x] = v;
            }
        }
    }
    img
}

/// Truncated-window box blur, one channel plane at a time.
fn box_blur(img: &[f64], image_size: usize, channels: usize, radius: usize) -> Vec<f64> {
    let hw = image_size * image_size;
    let r = radius as isize;
    let n = image_size as isize;
    let mut out = vec![0.0; img.len()];
    for c in 0..channels {
        let plane = &img[c * hw..(c + 1) * hw];
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && yy < n && xx >= 0 && xx < n {
                            acc += plane[(yy * n + xx) as usize];
                            cnt += 1.0;
                        }
                    }
                }
                out[c * hw + (y * n + x) as usize] = acc / cnt;
            }
        }
    }
    out
}

/// color shift, then brightness, then blur, then noise, then clamp to [0,1].
fn domain_transform(img: &mut Vec<f64>, spec: &DomainSpec, image_size: usize, channels: usize, rng: &mut Rng) {
    let hw = image_size * image_size;
    for c in 0..channels {
        let shift = spec.color_shift[c % 3];
        for v in &mut img[c * hw..(c + 1) * hw] {
            *v = (*v + shift) * spec.brightness;
        }
    }
    if spec.blur_radius > 0 {
        *img = box_blur(img, image_size, channels, spec.blur_radius);
    }
    for v in img.iter_mut() {
        if spec.noise_std > 0.0 {
            let n: f64 = standard_normal(rng);
            *v += n * spec.noise_std;
        }
        *v = v.clamp(0.0, 1.0);
    }
}

/// Deterministically generates `count_per_class` live/spoof pairs for one
/// domain. Layout: live block, then spoof block, paired by index.
pub fn generate_domain<T: Scalar>(
    spec: &DomainSpec,
    data: &DataConfig,
    seed: u64,
) -> Result<DomainDataset<T>> {
    spec.validate()?;
    if data.count_per_class == 0 {
        return Err(Error::config("count_per_class must be >= 1"));
    }
    let mut rng = stream_rng(
        derive_seed(seed, &["domain", &spec.domain_id]),
        Stream::Data,
    );
    let art = artifact_pattern(spec.artifact, data.image_size, data.channels, spec.grid_phase);
    let mut live = Vec::with_capacity(data.count_per_class);
    let mut spoof = Vec::with_capacity(data.count_per_class);
    for _ in 0..data.count_per_class {
        let base = blob(&mut rng, data.image_size, data.channels);
        let mut l = base.clone();
        domain_transform(&mut l, spec, data.image_size, data.channels, &mut rng);
        let mut s: Vec<f64> = base.iter().zip(&art).map(|(b, a)| b + a).collect();
        domain_transform(&mut s, spec, data.image_size, data.channels, &mut rng);
        live.push(Sample {
            pixels: l.into_iter().map(T::from_f64).collect(),
            label: 1,
        });
        spoof.push(Sample {
            pixels: s.into_iter().map(T::from_f64).collect(),
            label: 0,
        });
    }
    live.extend(spoof);
    Ok(DomainDataset {
        domain_id: spec.domain_id.clone(),
        image_size: data.image_size,
        channels: data.channels,
        samples: live,
    })
}

/// Few-shot holdout: k live + k spoof drawn without replacement; the
/// remainder is the evaluation set, disjoint from the shots.
#[derive(Debug, Clone)]
pub struct FewShotSplit<T> {
    pub domain_id: String,
    pub shots: Vec<Sample<T>>,
    pub remainder: Vec<Sample<T>>,
    /// Indices into the source dataset's sample list, one per shot.
    pub shot_indices: Vec<usize>,
}

impl<T> FewShotSplit<T> {
    pub fn k(&self) -> usize {
        self.shots.len() / 2
    }
}

pub fn few_shot_split<T: Scalar>(
    target: &DomainDataset<T>,
    k: usize,
    seed: u64,
) -> Result<FewShotSplit<T>> {
    let live = target.class_indices(1);
    let spoof = target.class_indices(0);
    if live.len() < k || spoof.len() < k {
        return Err(Error::usage(format!(
            "{}: need {k} shots per class, have {} live / {} spoof",
            target.domain_id,
            live.len(),
            spoof.len()
        )));
    }
    let mut rng = stream_rng(
        derive_seed(seed, &["split", &target.domain_id]),
        Stream::Data,
    );
    let mut pick = |pool: &[usize]| -> Vec<usize> {
        let mut chosen = rand::seq::index::sample(&mut rng, pool.len(), k).into_vec();
        chosen.sort_unstable();
        chosen.into_iter().map(|i| pool[i]).collect()
    };
    let mut shot_indices = pick(&live);
    shot_indices.extend(pick(&spoof));
    let shots: Vec<Sample<T>> = shot_indices
        .iter()
        .map(|&i| target.samples[i].clone())
        .collect();
    let remainder = (0..target.samples.len())
        .filter(|i| !shot_indices.contains(i))
        .map(|i| target.samples[i].clone())
        .collect();
    Ok(FewShotSplit {
        domain_id: target.domain_id.clone(),
        shots,
        remainder,
        shot_indices,
    })
}

/// One balanced training batch: N source blocks plus (if any shots) a target
/// block, each exactly B/2 live + B/2 spoof, live rows first. `domain_ids`
/// number the source blocks 0..N-1 and the target block N.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub images: Vec<T>,
    pub labels: Vec<usize>,
    pub domain_ids: Vec<usize>,
    pub pixels_per_image: usize,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[T] {
        &self.images[i * self.pixels_per_image..(i + 1) * self.pixels_per_image]
    }
}

fn mirror_in_place<T: Copy>(pixels: &mut [T], image_size: usize, channels: usize) {
    let hw = image_size * image_size;
    for c in 0..channels {
        for y in 0..image_size {
            let row = &mut pixels[c * hw + y * image_size..c * hw + (y + 1) * image_size];
            row.reverse();
        }
    }
}

/// Draws B/2 live + B/2 spoof per domain without replacement; the target
/// block reuses shots with replacement when 2k < B. With `flip`, each image
/// is mirrored horizontally with probability 1/2.
pub fn sample_batch<T: Scalar>(
    sources: &[&DomainDataset<T>],
    shots: Option<&FewShotSplit<T>>,
    block_size: usize,
    flip: bool,
    rng: &mut Rng,
) -> Result<Batch<T>> {
    if block_size == 0 || block_size % 2 != 0 {
        return Err(Error::config(format!(
            "per-domain batch size must be even and positive, got {block_size}"
        )));
    }
    if sources.is_empty() {
        return Err(Error::usage("no source domains"));
    }
    let half = block_size / 2;
    let ppi = sources[0].pixels_per_image();
    let (image_size, channels) = (sources[0].image_size, sources[0].channels);

    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut domain_ids = Vec::new();
    let push = |sample: &Sample<T>, domain: usize, images: &mut Vec<T>, labels: &mut Vec<usize>, domain_ids: &mut Vec<usize>| {
        images.extend_from_slice(&sample.pixels);
        labels.push(sample.label);
        domain_ids.push(domain);
    };

    for (d, src) in sources.iter().enumerate() {
        if src.pixels_per_image() != ppi {
            return Err(Error::usage(format!(
                "domain {} image size differs from {}",
                src.domain_id, sources[0].domain_id
            )));
        }
        for label in [1usize, 0] {
            let pool = src.class_indices(label);
            if pool.len() < half {
                return Err(Error::usage(format!(
                    "domain {}: {} samples with label {label}, need {half}",
                    src.domain_id,
                    pool.len()
                )));
            }
            let mut chosen = rand::seq::index::sample(rng, pool.len(), half).into_vec();
            chosen.sort_unstable();
            for i in chosen {
                push(&src.samples[pool[i]], d, &mut images, &mut labels, &mut domain_ids);
            }
        }
    }

    if let Some(split) = shots.filter(|s| !s.shots.is_empty()) {
        let k = split.k();
        let target_domain = sources.len();
        for label in [1usize, 0] {
            let pool: Vec<&Sample<T>> =
                split.shots.iter().filter(|s| s.label == label).collect();
            debug_assert_eq!(pool.len(), k);
            if k >= half {
                let mut chosen = rand::seq::index::sample(rng, k, half).into_vec();
                chosen.sort_unstable();
                for i in chosen {
                    push(pool[i], target_domain, &mut images, &mut labels, &mut domain_ids);
                }
            } else {
                for _ in 0..half {
                    let i = rng.random_range(0..k);
                    push(pool[i], target_domain, &mut images, &mut labels, &mut domain_ids);
                }
            }
        }
    }

    if flip {
        for i in 0..labels.len() {
            if rng.random_range(0..2) == 1 {
                mirror_in_place(&mut images[i * ppi..(i + 1) * ppi], image_size, channels);
            }
        }
    }

    Ok(Batch {
        images,
        labels,
        domain_ids,
        pixels_per_image: ppi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ArtifactKind;

    fn plain_spec(id: &str, artifact: ArtifactKind) -> DomainSpec {
        DomainSpec {
            domain_id: id.into(),
            artifact,
            grid_phase: 0.0,
            color_shift: [0.0; 3],
            noise_std: 0.0,
            blur_radius: 0,
            brightness: 1.0,
        }
    }

    fn small_data(count: usize) -> DataConfig {
        DataConfig {
            image_size: 8,
            channels: 3,
            count_per_class: count,
            domains: Vec::new(),
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DomainSpec {
            noise_std: 0.05,
            blur_radius: 1,
            ..plain_spec("d", ArtifactKind::GridCoarse)
        };
        let a: DomainDataset<f32> = generate_domain(&spec, &small_data(6), 42).unwrap();
        let b: DomainDataset<f32> = generate_domain(&spec, &small_data(6), 42).unwrap();
        assert_eq!(a, b);
        let c: DomainDataset<f32> = generate_domain(&spec, &small_data(6), 43).unwrap();
        assert_ne!(a, c);
    }

    fn assert_exact_difference<T: Scalar>(kind: ArtifactKind, phase: f64) {
        let spec = DomainSpec {
            grid_phase: phase,
            ..plain_spec("d", kind)
        };
        let data = small_data(4);
        let ds: DomainDataset<T> = generate_domain(&spec, &data, 7).unwrap();
        let art = artifact_pattern(kind, data.image_size, data.channels, phase);
        let (live, spoof) = ds.class_counts();
        assert_eq!((live, spoof), (4, 4));
        for i in 0..4 {
            let l = &ds.samples[i];
            let s = &ds.samples[4 + i];
            assert_eq!(l.label, 1);
            assert_eq!(s.label, 0);
            for (j, (&sv, &lv)) in s.pixels.iter().zip(&l.pixels).enumerate() {
                assert_eq!(
                    (sv - lv).as_f64(),
                    art[j],
                    "{kind:?} sample {i} pixel {j}"
                );
            }
        }
    }

    #[test]
    fn identity_transform_difference_is_the_artifact() {
        // intensities live on the 1/4096 grid, so the difference is exact
        // in both precisions, at zero and nonzero grid phase
        for kind in [
            ArtifactKind::GridCoarse,
            ArtifactKind::GridFine,
            ArtifactKind::Frame,
            ArtifactKind::ColorCast,
        ] {
            for phase in [0.0, 1.1] {
                assert_exact_difference::<f64>(kind, phase);
                assert_exact_difference::<f32>(kind, phase);
            }
        }
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let spec = DomainSpec {
            color_shift: [0.3, -0.3, 0.0],
            noise_std: 0.4,
            brightness: 1.8,
            ..plain_spec("d", ArtifactKind::Frame)
        };
        let ds: DomainDataset<f64> = generate_domain(&spec, &small_data(8), 1).unwrap();
        for s in &ds.samples {
            assert!(s.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn few_shot_split_shapes_and_disjointness() {
        let spec = plain_spec("t", ArtifactKind::ColorCast);
        let data = DataConfig {
            count_per_class: 200,
            ..small_data(200)
        };
        let ds: DomainDataset<f32> = generate_domain(&spec, &data, 3).unwrap();
        let split = few_shot_split(&ds, 5, 11).unwrap();
        assert_eq!(split.shots.len(), 10);
        assert_eq!(split.remainder.len(), 390);
        assert_eq!(split.shots.iter().filter(|s| s.label == 1).count(), 5);

        // identical under the same seed, different under another
        let again = few_shot_split(&ds, 5, 11).unwrap();
        assert_eq!(split.shot_indices, again.shot_indices);
        let other = few_shot_split(&ds, 5, 12).unwrap();
        assert_ne!(split.shot_indices, other.shot_indices);

        // disjointness by sample identity across several seeds
        for seed in 0..10 {
            let sp = few_shot_split(&ds, 7, seed).unwrap();
            let mut sorted = sp.shot_indices.clone();
            sorted.dedup();
            assert_eq!(sorted.len(), 14);
            assert_eq!(sp.shots.len() + sp.remainder.len(), ds.samples.len());
        }
    }

    #[test]
    fn zero_and_excess_shots() {
        let spec = plain_spec("t", ArtifactKind::Frame);
        let ds: DomainDataset<f32> = generate_domain(&spec, &small_data(4), 3).unwrap();
        let split = few_shot_split(&ds, 0, 1).unwrap();
        assert!(split.shots.is_empty());
        assert_eq!(split.remainder.len(), 8);
        let err = few_shot_split(&ds, 5, 1).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    fn three_sources_and_target(
        count: usize,
    ) -> (Vec<DomainDataset<f32>>, DomainDataset<f32>) {
        let data = DataConfig {
            count_per_class: count,
            ..small_data(count)
        };
        let sources: Vec<DomainDataset<f32>> = [
            ("s0", ArtifactKind::GridCoarse),
            ("s1", ArtifactKind::GridFine),
            ("s2", ArtifactKind::Frame),
        ]
        .iter()
        .map(|(id, kind)| generate_domain(&plain_spec(id, *kind), &data, 5).unwrap())
        .collect();
        let target = generate_domain(&plain_spec("t", ArtifactKind::ColorCast), &data, 5).unwrap();
        (sources, target)
    }

    #[test]
    fn batch_layout_matches_contract() {
        let (sources, target) = three_sources_and_target(8);
        let split = few_shot_split(&target, 5, 1).unwrap();
        let refs: Vec<&DomainDataset<f32>> = sources.iter().collect();
        let mut rng = stream_rng(2, Stream::Data);
        let batch = sample_batch(&refs, Some(&split), 8, false, &mut rng).unwrap();
        assert_eq!(batch.len(), 32);
        assert_eq!(batch.images.len(), 32 * 8 * 8 * 3);
        for block in 0..4 {
            for i in 0..8 {
                let idx = block * 8 + i;
                assert_eq!(batch.domain_ids[idx], block);
                assert_eq!(batch.labels[idx], if i < 4 { 1 } else { 0 });
            }
        }
    }

    #[test]
    fn scarce_shots_repeat_with_replacement() {
        let (sources, target) = three_sources_and_target(8);
        let split = few_shot_split(&target, 1, 1).unwrap();
        let refs: Vec<&DomainDataset<f32>> = sources.iter().collect();
        let mut rng = stream_rng(3, Stream::Data);
        let batch = sample_batch(&refs, Some(&split), 8, false, &mut rng).unwrap();
        assert_eq!(batch.len(), 32);
        let live_shot = &split.shots[0].pixels;
        let spoof_shot = &split.shots[1].pixels;
        for i in 24..28 {
            assert_eq!(batch.image(i), &live_shot[..]);
        }
        for i in 28..32 {
            assert_eq!(batch.image(i), &spoof_shot[..]);
        }
    }

    #[test]
    fn zero_shot_batch_has_source_blocks_only() {
        let (sources, _) = three_sources_and_target(8);
        let refs: Vec<&DomainDataset<f32>> = sources.iter().collect();
        let mut rng = stream_rng(4, Stream::Data);
        let batch = sample_batch(&refs, None, 8, false, &mut rng).unwrap();
        assert_eq!(batch.len(), 24);
        assert_eq!(batch.domain_ids.iter().max(), Some(&2));
    }

    #[test]
    fn odd_block_size_is_config_error() {
        let (sources, _) = three_sources_and_target(8);
        let refs: Vec<&DomainDataset<f32>> = sources.iter().collect();
        let mut rng = stream_rng(4, Stream::Data);
        let err = sample_batch(&refs, None, 7, false, &mut rng).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn batch_balance_holds_over_many_draws() {
        let (sources, target) = three_sources_and_target(8);
        let split = few_shot_split(&target, 3, 1).unwrap();
        let refs: Vec<&DomainDataset<f32>> = sources.iter().collect();
        let mut rng = stream_rng(5, Stream::Data);
        for _ in 0..10_000 {
            let batch = sample_batch(&refs, Some(&split), 8, true, &mut rng).unwrap();
            for block in 0..4 {
                let lives = (0..8)
                    .filter(|i| batch.labels[block * 8 + i] == 1)
                    .count();
                assert_eq!(lives, 4);
                assert!(batch.domain_ids[block * 8..block * 8 + 8]
                    .iter()
                    .all(|&d| d == block));
            }
        }
    }

    #[test]
    fn within_batch_draws_do_not_repeat_source_rows() {
        // count_per_class == half: every source sample must appear exactly once
        let (sources, _) = three_sources_and_target(4);
        let refs: Vec<&DomainDataset<f32>> = sources.iter().collect();
        let mut rng = stream_rng(6, Stream::Data);
        let batch = sample_batch(&refs, None, 8, false, &mut rng).unwrap();
        for (d, src) in sources.iter().enumerate() {
            for i in 0..4 {
                assert_eq!(batch.image(d * 8 + i), &src.samples[i].pixels[..]);
            }
        }
        let _ = refs;
    }

    #[test]
    fn flip_produces_originals_or_mirrors() {
        let (sources, _) = three_sources_and_target(4);
        let refs: Vec<&DomainDataset<f32>> = sources.iter().collect();
        let mut rng = stream_rng(7, Stream::Data);
        let batch = sample_batch(&refs, None, 8, true, &mut rng).unwrap();
        let mut flipped = 0;
        for i in 0..batch.len() {
            let img = batch.image(i);
            let src = &refs[batch.domain_ids[i]];
            let matched = src.samples.iter().any(|s| {
                if s.pixels == img {
                    return true;
                }
                let mut m = s.pixels.clone();
                mirror_in_place(&mut m, src.image_size, src.channels);
                m == img
            });
            assert!(matched, "image {i} is neither an original nor a mirror");
            if !src.samples.iter().any(|s| s.pixels == img) {
                flipped += 1;
            }
        }
        assert!(flipped > 0, "no image was flipped across 24 draws");
    }

    #[test]
    fn mirror_is_involutive() {
        let mut px: Vec<f32> = (0..2 * 3 * 3).map(|i| i as f32).collect();
        let orig = px.clone();
        mirror_in_place(&mut px, 3, 2);
        assert_ne!(px, orig);
        mirror_in_place(&mut px, 3, 2);
        assert_eq!(px, orig);
    }
}
