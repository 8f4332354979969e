//! Synthetic aggregated data drawn from the generative model on each domain's grid.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::AggregatedDataset;
use crate::error::{Error, Result};
use crate::geometry::{membership, weight_vector, AggregationRule, Domain, Partition, Support};
use crate::kernels::{sq_dist, SEKernel};
use crate::model::Factor;
use crate::rng::{NormalStream, Stream};

/// Mixing weights, either given per domain or drawn from a shared prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSpec {
    /// `[domain][attribute][latent]`, over the full attribute list.
    Fixed(Vec<Vec<Vec<f64>>>),
    /// Shared prior mean and variance, `[attribute][latent]`.
    Prior { mean: Vec<Vec<f64>>, var: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPartition {
    /// Dataset id.
    pub id: String,
    pub attribute: String,
    /// Number of supports along each axis; cells are split as evenly as possible.
    pub bins: Vec<usize>,
    /// Observation noise variance, original units.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDomain {
    pub id: String,
    pub extent: Vec<(f64, f64)>,
    pub shape: Vec<usize>,
    pub partitions: Vec<SynthPartition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub attributes: Vec<String>,
    /// True length scale of each latent process.
    pub betas: Vec<f64>,
    pub weights: WeightSpec,
    /// Constant added to each attribute field.
    pub offsets: Vec<f64>,
    pub domains: Vec<SynthDomain>,
    /// Emit one-dimensional supports as intervals rather than cell lists.
    #[serde(default = "default_true")]
    pub intervals: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub attributes: Vec<String>,
    pub domains: Vec<Domain>,
    /// Noisy observations, one dataset per configured partition.
    pub datasets: Vec<AggregatedDataset>,
    /// Noiseless aggregates over the same partitions.
    pub truth: Vec<AggregatedDataset>,
    /// Weights used for each domain, attributes x latents.
    pub weights: Vec<DMatrix<f64>>,
}

impl SynthOutput {
    pub fn dataset(&self, id: &str) -> Option<&AggregatedDataset> {
        self.datasets.iter().find(|d| d.id == id)
    }

    pub fn truth(&self, id: &str) -> Option<&AggregatedDataset> {
        self.truth.iter().find(|d| d.id == id)
    }
}

impl SynthConfig {
    fn check(&self) -> Result<()> {
        let s = self.attributes.len();
        let l = self.betas.len();
        if s == 0 || l == 0 {
            return Err(Error::InvalidConfig("synthetic data needs at least one attribute and one latent".into()));
        }
        if let Some(b) = self.betas.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(Error::InvalidConfig(format!("latent scale {b} is not positive")));
        }
        if self.offsets.len() != s {
            return Err(Error::LengthMismatch { expected: s, actual: self.offsets.len() });
        }
        let shaped = |m: &Vec<Vec<f64>>| m.len() == s && m.iter().all(|r| r.len() == l);
        match &self.weights {
            WeightSpec::Fixed(per_domain) => {
                if per_domain.len() != self.domains.len() || !per_domain.iter().all(shaped) {
                    return Err(Error::InvalidConfig("fixed weights must be domains x attributes x latents".into()));
                }
            }
            WeightSpec::Prior { mean, var } => {
                if !shaped(mean) || !shaped(var) {
                    return Err(Error::InvalidConfig("prior weights must be attributes x latents".into()));
                }
                if var.iter().flatten().any(|v| !(*v >= 0.0)) {
                    return Err(Error::InvalidConfig("prior weight variances must be non-negative".into()));
                }
            }
        }
        for d in &self.domains {
            for p in &d.partitions {
                if !self.attributes.contains(&p.attribute) {
                    return Err(Error::InvalidConfig(format!("partition {} names unknown attribute {}", p.id, p.attribute)));
                }
                if p.bins.len() != d.shape.len() || p.bins.iter().zip(&d.shape).any(|(&b, &n)| b == 0 || b > n) {
                    return Err(Error::InvalidConfig(format!("partition {}: bins {:?} do not fit grid {:?}", p.id, p.bins, d.shape)));
                }
                if !(p.noise >= 0.0 && p.noise.is_finite()) {
                    return Err(Error::InvalidConfig(format!("partition {}: noise variance must be non-negative", p.id)));
                }
            }
        }
        Ok(())
    }
}

/// Supports tiling the grid in `bins` blocks per axis, row-major over blocks.
fn block_supports(domain: &Domain, part: &SynthPartition, intervals: bool) -> Vec<Support> {
    let shape = &domain.grid.shape;
    let edges: Vec<Vec<usize>> = part.bins.iter().zip(shape).map(|(&b, &n)| (0..=b).map(|k| k * n / b).collect()).collect();
    if intervals && shape.len() == 1 {
        let (lo, _) = domain.extent[0];
        let h = domain.grid.cell_size[0];
        return edges[0]
            .windows(2)
            .enumerate()
            .map(|(k, w)| Support::interval(format!("{}-{k}", part.id), domain.id.clone(), lo + w[0] as f64 * h, lo + w[1] as f64 * h))
            .collect();
    }
    let total: usize = part.bins.iter().product();
    (0..total)
        .map(|flat| {
            let mut rem = flat;
            let mut block = vec![0; part.bins.len()];
            for axis in (0..part.bins.len()).rev() {
                block[axis] = rem % part.bins[axis];
                rem /= part.bins[axis];
            }
            let ranges: Vec<std::ops::Range<usize>> =
                block.iter().enumerate().map(|(a, &k)| edges[a][k]..edges[a][k + 1]).collect();
            let mut cells = Vec::new();
            let mut idx = vec![0; ranges.len()];
            fn walk(ranges: &[std::ops::Range<usize>], axis: usize, idx: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
                if axis == ranges.len() {
                    out.push(idx.clone());
                    return;
                }
                for k in ranges[axis].clone() {
                    idx[axis] = k;
                    walk(ranges, axis + 1, idx, out);
                }
            }
            let mut multi = Vec::new();
            walk(&ranges, 0, &mut idx, &mut multi);
            for m in multi {
                cells.push(domain.grid.flat_index(&m));
            }
            Support::cells(format!("{}-{flat}", part.id), domain.id.clone(), cells)
        })
        .collect()
}

/// Draws latent fields on every grid, mixes them, aggregates over each partition and adds noise.
///
/// Draw order on the synthetic stream: prior weights (domain, attribute, latent),
/// then per domain the latent fields (latent, cell) followed by the noise of each
/// partition in configuration order.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.check()?;
    let mut stream = NormalStream::new(cfg.seed, Stream::Synth);
    let s_count = cfg.attributes.len();
    let l_count = cfg.betas.len();
    let weights: Vec<DMatrix<f64>> = match &cfg.weights {
        WeightSpec::Fixed(per_domain) => per_domain
            .iter()
            .map(|m| DMatrix::from_fn(s_count, l_count, |s, l| m[s][l]))
            .collect(),
        WeightSpec::Prior { mean, var } => (0..cfg.domains.len())
            .map(|_| {
                let mut m = DMatrix::zeros(s_count, l_count);
                for s in 0..s_count {
                    for l in 0..l_count {
                        m[(s, l)] = mean[s][l] + var[s][l].sqrt() * stream.next();
                    }
                }
                m
            })
            .collect(),
    };

    let mut domains = Vec::new();
    let mut datasets = Vec::new();
    let mut truth = Vec::new();
    for (sd, w) in cfg.domains.iter().zip(&weights) {
        let domain = Domain::with_cells(sd.id.clone(), sd.extent.clone(), &sd.shape)?;
        let g = domain.grid.len();
        let points: Vec<Vec<f64>> = (0..g).map(|c| domain.grid.point(c)).collect();
        let mut latent = Vec::with_capacity(l_count);
        for &beta in &cfg.betas {
            let k = SEKernel::new(beta);
            let gram = DMatrix::from_fn(g, g, |i, j| k.of_sq_dist(sq_dist(&points[i], &points[j])));
            let factor = Factor::new(&gram)?;
            let z = DVector::from_fn(g, |_, _| stream.next());
            latent.push(factor.chol.l() * z);
        }
        let field = |s: usize, c: usize| cfg.offsets[s] + (0..l_count).map(|l| w[(s, l)] * latent[l][c]).sum::<f64>();

        for part in &sd.partitions {
            let s = cfg.attributes.iter().position(|a| *a == part.attribute).unwrap();
            let supports = block_supports(&domain, part, cfg.intervals);
            let mut clean = Vec::with_capacity(supports.len());
            for sup in &supports {
                let members = membership(sup, &domain.grid)?;
                let wts = weight_vector(sup, &domain.grid, &AggregationRule::Average)?;
                clean.push(members.iter().zip(&wts).map(|(&c, &a)| a * field(s, c)).sum::<f64>());
            }
            let sd_noise = part.noise.sqrt();
            let noisy: Vec<f64> = clean.iter().map(|&y| y + sd_noise * stream.next()).collect();
            let partition = Partition { attribute_id: part.attribute.clone(), domain_id: sd.id.clone(), supports };
            datasets.push(AggregatedDataset::new(part.id.clone(), partition.clone(), AggregationRule::Average, noisy));
            truth.push(AggregatedDataset::new(part.id.clone(), partition, AggregationRule::Average, clean));
        }
        domains.push(domain);
    }
    Ok(SynthOutput { attributes: cfg.attributes.clone(), domains, datasets, truth, weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_config(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            attributes: vec!["a".into()],
            betas: vec![1e6],
            weights: WeightSpec::Fixed(vec![vec![vec![1.0]]]),
            offsets: vec![0.0],
            domains: vec![SynthDomain {
                id: "v".into(),
                extent: vec![(0.0, 1.0)],
                shape: vec![30],
                partitions: vec![SynthPartition { id: "p".into(), attribute: "a".into(), bins: vec![6], noise: 0.0 }],
            }],
            intervals: true,
        }
    }

    #[test]
    fn flat_field_gives_equal_aggregates() {
        let out = synth_generate(&flat_config(4)).unwrap();
        let ys = &out.datasets[0].values;
        assert_eq!(ys.len(), 6);
        for y in ys {
            assert!((y - ys[0]).abs() < 1e-3, "{ys:?}");
        }
        assert_eq!(out.datasets[0].values, out.truth[0].values);
    }

    #[test]
    fn same_seed_same_data() {
        let mut cfg = flat_config(9);
        cfg.betas = vec![0.2];
        cfg.domains[0].partitions[0].noise = 0.1;
        assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
        cfg.seed = 10;
        assert_ne!(synth_generate(&cfg).unwrap().datasets, synth_generate(&flat_config(9)).unwrap().datasets);
    }

    #[test]
    fn two_dimensional_blocks_tile_the_grid() {
        let mut cfg = flat_config(1);
        cfg.domains[0].extent = vec![(0.0, 1.0), (0.0, 2.0)];
        cfg.domains[0].shape = vec![5, 7];
        cfg.domains[0].partitions[0].bins = vec![2, 3];
        let out = synth_generate(&cfg).unwrap();
        let mut seen: Vec<usize> = out.datasets[0]
            .partition
            .supports
            .iter()
            .flat_map(|s| membership(s, &out.domains[0].grid).unwrap())
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..35).collect::<Vec<_>>());
    }

    #[test]
    fn bad_configs_rejected() {
        let mut cfg = flat_config(1);
        cfg.domains[0].partitions[0].bins = vec![31];
        assert!(synth_generate(&cfg).is_err());
        let mut cfg = flat_config(1);
        cfg.offsets = vec![];
        assert!(synth_generate(&cfg).is_err());
    }
}
