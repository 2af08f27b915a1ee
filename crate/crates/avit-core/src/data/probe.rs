//! Nearest-centroid probe on raw pixels. Its decision rule is linear
//! (difference of squared centroid distances), which is exactly the
//! "linear probe" the dataset contract promises is sufficient in-domain.

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics;
use crate::scalar::Scalar;

/// live iff w . x + b >= 0
#[derive(Debug, Clone)]
pub struct Probe {
    pub w: Vec<f64>,
    pub b: f64,
}

pub fn train_probe<T: Scalar>(samples: &[&Sample<T>]) -> Result<Probe> {
    let dim = samples
        .first()
        .map(|s| s.pixels.len())
        .ok_or_else(|| Error::usage("cannot train a probe on zero samples"))?;
    let mut live = vec![0.0f64; dim];
    let mut spoof = vec![0.0f64; dim];
    let (mut nl, mut ns) = (0usize, 0usize);
    for s in samples {
        let (acc, n) = if s.label == 1 {
            (&mut live, &mut nl)
        } else {
            (&mut spoof, &mut ns)
        };
        for (a, &p) in acc.iter_mut().zip(&s.pixels) {
            *a += p.as_f64();
        }
        *n += 1;
    }
    if nl == 0 || ns == 0 {
        return Err(Error::usage(format!(
            "probe needs both classes: {nl} live / {ns} spoof"
        )));
    }
    for v in &mut live {
        *v /= nl as f64;
    }
    for v in &mut spoof {
        *v /= ns as f64;
    }
    let w: Vec<f64> = live.iter().zip(&spoof).map(|(l, s)| l - s).collect();
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let b = (sq(&spoof) - sq(&live)) / 2.0;
    Ok(Probe { w, b })
}

impl Probe {
    pub fn score<T: Scalar>(&self, pixels: &[T]) -> f64 {
        self.w
            .iter()
            .zip(pixels)
            .map(|(w, p)| w * p.as_f64())
            .sum::<f64>()
            + self.b
    }

    pub fn accuracy<T: Scalar>(&self, samples: &[&Sample<T>]) -> f64 {
        let hits = samples
            .iter()
            .filter(|s| (self.score(&s.pixels) >= 0.0) == (s.label == 1))
            .count();
        hits as f64 / samples.len().max(1) as f64
    }

    pub fn auc<T: Scalar>(&self, samples: &[&Sample<T>]) -> Result<f64> {
        let scores: Vec<f64> = samples.iter().map(|s| self.score(&s.pixels)).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        Ok(metrics::auc(&metrics::roc(&scores, &labels)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;
    use crate::data::{few_shot_split, generate_domain, DomainDataset};

    #[test]
    fn in_domain_linear_separability() {
        let data = DataConfig::default(); // 32x32, 200 per class, 4 domains
        for spec in &data.domains {
            let ds: DomainDataset<f32> = generate_domain(spec, &data, 17).unwrap();
            // train on even indices, test on odd: both halves stay balanced
            // because the dataset is the live block then the spoof block
            let train: Vec<&Sample<f32>> =
                ds.samples.iter().step_by(2).collect();
            let test: Vec<&Sample<f32>> =
                ds.samples.iter().skip(1).step_by(2).collect();
            let probe = train_probe(&train).unwrap();
            let acc = probe.accuracy(&test);
            assert!(acc > 0.95, "{}: accuracy {acc}", spec.domain_id);
        }
    }

    #[test]
    fn domain_shift_is_real() {
        // a probe fit on the sources transfers worse to the held-out target
        // than one fit on the target's own training split, on >= 2/3 seeds
        let mut wins = 0;
        let mut table = Vec::new();
        for seed in 0..3u64 {
            let data = DataConfig {
                count_per_class: 60,
                ..DataConfig::default()
            };
            let (target_spec, source_specs) = data.domains.split_last().unwrap();
            let sources: Vec<DomainDataset<f32>> = source_specs
                .iter()
                .map(|s| generate_domain(s, &data, seed).unwrap())
                .collect();
            let target: DomainDataset<f32> =
                generate_domain(target_spec, &data, seed).unwrap();
            let split = few_shot_split(&target, 30, seed).unwrap();

            let source_samples: Vec<&Sample<f32>> =
                sources.iter().flat_map(|d| d.samples.iter()).collect();
            let target_train: Vec<&Sample<f32>> = split.shots.iter().collect();
            let eval: Vec<&Sample<f32>> = split.remainder.iter().collect();

            let from_sources = train_probe(&source_samples).unwrap().auc(&eval).unwrap();
            let from_target = train_probe(&target_train).unwrap().auc(&eval).unwrap();
            if from_target > from_sources {
                wins += 1;
            }
            table.push((from_sources, from_target));
        }
        assert!(
            wins >= 2,
            "target-trained probe won only {wins}/3 seeds: (sources, target) AUC = {table:?}"
        );
    }

    #[test]
    fn probe_rejects_degenerate_input() {
        let err = train_probe::<f32>(&[]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let s = Sample {
            pixels: vec![0.5f32; 4],
            label: 1,
        };
        let err = train_probe(&[&s, &s]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
