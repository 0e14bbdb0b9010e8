//! Synthetic teacher-student task, non-IID client partitioning and data-size
//! scaling factors.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{invalid, FloraError, Result};
use crate::lora::{BaseWeights, Dim, Matrix};
use crate::rng::{derive_seed, permutation, rng_from_seed};

pub const DEFAULT_TEACHER_RANK: usize = 4;
/// Share of generated samples held out for global evaluation.
pub const EVAL_FRACTION: f64 = 0.2;

const TAG_TEACHER: u64 = 0x7465_6163;
const TAG_SAMPLES: u64 = 0x7361_6d70;
const TAG_SPLIT: u64 = 0x7370_6c74;
const TAG_SIZES: u64 = 0x7369_7a65;
const TAG_SHIFT: u64 = 0x7368_6674;
const TAG_LABELS: u64 = 0x6c61_6265;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Index into the generated sample list; stable across partitioning.
    pub id: usize,
    pub x: Array1<f64>,
    pub y: Array1<f64>,
    /// `argmax(y)`, used by the classification loss.
    pub label: usize,
}

pub fn argmax(v: ArrayView1<'_, f64>) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

impl Sample {
    fn new(id: usize, x: Array1<f64>, y: Array1<f64>) -> Self {
        let label = argmax(y.view());
        Sample { id, x, y, label }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalTask {
    /// Ground-truth mapping `W*`.
    pub teacher: Matrix,
    /// Shared pre-trained point `W = W* − Δ*`.
    pub base: BaseWeights,
    pub noise_std: f64,
    pub seed: u64,
    /// Samples available for partitioning to clients.
    pub train: Vec<Sample>,
    /// Held-out global evaluation set; never given to clients.
    pub eval: Vec<Sample>,
}

impl GlobalTask {
    pub fn dim(&self) -> Dim {
        self.base.dim()
    }
}

pub fn gen_task(dim: Dim, samples_total: usize, noise_std: f64, seed: u64) -> Result<GlobalTask> {
    gen_task_with_rank(dim, samples_total, noise_std, DEFAULT_TEACHER_RANK, seed)
}

/// Teacher `W*` has `N(0, 1/n)` entries; the pre-trained point is `W* − U·Vᵀ`
/// with a rank-`teacher_rank` gap. Inputs are standard normal and targets are
/// `W*·x + ε`.
pub fn gen_task_with_rank(
    dim: Dim,
    samples_total: usize,
    noise_std: f64,
    teacher_rank: usize,
    seed: u64,
) -> Result<GlobalTask> {
    let dim = Dim::new(dim.m, dim.n)?;
    if samples_total == 0 {
        return Err(invalid("samples_total must be at least 1"));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(invalid(format!("noise_std must be finite and >= 0, got {noise_std}")));
    }
    if teacher_rank == 0 {
        return Err(invalid("teacher rank must be at least 1"));
    }
    let Dim { m, n } = dim;

    let mut rng = rng_from_seed(derive_seed(&[seed, TAG_TEACHER]));
    let w_scale = 1.0 / (n as f64).sqrt();
    let teacher = Matrix::from_shape_simple_fn((m, n), || w_scale * rng.sample::<f64, _>(StandardNormal));
    let u_scale = 1.0 / (teacher_rank as f64).sqrt();
    let u = Matrix::from_shape_simple_fn((m, teacher_rank), || u_scale * rng.sample::<f64, _>(StandardNormal));
    let v = Matrix::from_shape_simple_fn((teacher_rank, n), || w_scale * rng.sample::<f64, _>(StandardNormal));
    let base = BaseWeights::new(&teacher - &u.dot(&v))?;

    let mut rng = rng_from_seed(derive_seed(&[seed, TAG_SAMPLES]));
    let mut samples: Vec<Sample> = (0..samples_total)
        .map(|id| {
            let x = Array1::from_shape_simple_fn(n, || rng.sample::<f64, _>(StandardNormal));
            let noise = Array1::from_shape_simple_fn(m, || noise_std * rng.sample::<f64, _>(StandardNormal));
            let y = teacher.dot(&x) + noise;
            Sample::new(id, x, y)
        })
        .collect();

    let eval_count = (samples_total as f64 * EVAL_FRACTION).floor() as usize;
    let order = permutation(samples_total, derive_seed(&[seed, TAG_SPLIT]));
    let mut is_eval = vec![false; samples_total];
    for &i in &order[..eval_count] {
        is_eval[i] = true;
    }
    let mut train = Vec::with_capacity(samples_total - eval_count);
    let mut eval = Vec::with_capacity(eval_count);
    for s in samples.drain(..) {
        if is_eval[s.id] {
            eval.push(s);
        } else {
            train.push(s);
        }
    }

    Ok(GlobalTask {
        teacher,
        base,
        noise_std,
        seed,
        train,
        eval,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SkewKind {
    Iid,
    FeatureShift,
    SizeSkew,
    LabelSkew,
}

impl SkewKind {
    pub fn name(self) -> &'static str {
        match self {
            SkewKind::Iid => "iid",
            SkewKind::FeatureShift => "feature-shift",
            SkewKind::SizeSkew => "size-skew",
            SkewKind::LabelSkew => "label-skew",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "iid" => Some(SkewKind::Iid),
            "feature-shift" => Some(SkewKind::FeatureShift),
            "size-skew" => Some(SkewKind::SizeSkew),
            "label-skew" => Some(SkewKind::LabelSkew),
            _ => None,
        }
    }
}

/// Non-IID recipe. Each component is off at strength 0; all zero is IID.
///
/// * feature shift: client `k` adds `strength · z_k`, `z_k ~ N(0, I)`, to every input
///   and the matching `W*·(strength · z_k)` to its target.
/// * size skew: client weights `(rank_k + 1)^(-strength)` over a seeded ranking.
/// * label skew: per class, client shares drawn from `Dirichlet(1/strength)`.
///
/// Size skew and label skew both decide shard sizes and cannot be combined.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SkewSpec {
    pub feature_shift: f64,
    pub size_skew: f64,
    pub label_skew: f64,
    pub seed: u64,
}

impl SkewSpec {
    pub fn iid(seed: u64) -> Self {
        SkewSpec {
            seed,
            ..Default::default()
        }
    }

    pub fn single(kind: SkewKind, strength: f64, seed: u64) -> Self {
        SkewSpec::iid(seed).with(kind, strength)
    }

    pub fn with(mut self, kind: SkewKind, strength: f64) -> Self {
        match kind {
            SkewKind::Iid => {}
            SkewKind::FeatureShift => self.feature_shift = strength,
            SkewKind::SizeSkew => self.size_skew = strength,
            SkewKind::LabelSkew => self.label_skew = strength,
        }
        self
    }

    /// Active components, in a fixed order.
    pub fn components(&self) -> Vec<(SkewKind, f64)> {
        [
            (SkewKind::FeatureShift, self.feature_shift),
            (SkewKind::SizeSkew, self.size_skew),
            (SkewKind::LabelSkew, self.label_skew),
        ]
        .into_iter()
        .filter(|&(_, s)| s != 0.0)
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (kind, s) in [
            (SkewKind::FeatureShift, self.feature_shift),
            (SkewKind::SizeSkew, self.size_skew),
            (SkewKind::LabelSkew, self.label_skew),
        ] {
            if !(s.is_finite() && s >= 0.0) {
                return Err(invalid(format!("{} strength must be finite and >= 0, got {s}", kind.name())));
            }
        }
        if self.size_skew > 0.0 && self.label_skew > 0.0 {
            return Err(invalid("size-skew and label-skew cannot be combined"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub samples: Vec<Sample>,
}

impl ClientShard {
    pub fn size(&self) -> usize {
        self.samples.len()
    }
}

/// SHA-256 over every shard's id, sample ids and the bit patterns of `x`, `y`.
pub fn shards_digest(shards: &[ClientShard]) -> String {
    let mut h = Sha256::new();
    for shard in shards {
        h.update((shard.client_id as u64).to_le_bytes());
        h.update((shard.samples.len() as u64).to_le_bytes());
        for s in &shard.samples {
            h.update((s.id as u64).to_le_bytes());
            for v in s.x.iter().chain(s.y.iter()) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// Splits `total` into integer parts proportional to `weights` (largest
/// remainder, ties to the lower index), then lifts empty parts to 1 by taking
/// from the largest part.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let mut sizes = largest_remainder(total, weights);
    lift_empty(&mut sizes);
    sizes
}

fn lift_empty(sizes: &mut [usize]) {
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let donor = (0..sizes.len())
            .max_by(|&i, &j| sizes[i].cmp(&sizes[j]).then(j.cmp(&i)))
            .unwrap();
        if sizes[donor] <= 1 {
            break;
        }
        sizes[donor] -= 1;
        sizes[empty] += 1;
    }
}

/// Partitions the task's training samples across `k_clients` shards.
///
/// Shards are disjoint and cover every training sample. Each shard holds at
/// least one sample.
pub fn partition(task: &GlobalTask, k_clients: usize, spec: &SkewSpec) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    if k_clients == 0 {
        return Err(invalid("k_clients must be at least 1"));
    }
    let total = task.train.len();
    if total < k_clients {
        return Err(invalid(format!(
            "{total} training samples cannot cover {k_clients} clients"
        )));
    }

    let mut members: Vec<Vec<usize>> = if spec.label_skew > 0.0 {
        label_skew_members(task, k_clients, spec)?
    } else {
        let weights: Vec<f64> = if spec.size_skew > 0.0 {
            let ranking = permutation(k_clients, derive_seed(&[spec.seed, TAG_SIZES]));
            ranking
                .iter()
                .map(|&r| ((r + 1) as f64).powf(-spec.size_skew))
                .collect()
        } else {
            vec![1.0; k_clients]
        };
        let sizes = apportion(total, &weights);
        let order = permutation(total, derive_seed(&[spec.seed, TAG_SPLIT]));
        let mut start = 0;
        sizes
            .iter()
            .map(|&sz| {
                let part = order[start..start + sz].to_vec();
                start += sz;
                part
            })
            .collect()
    };
    for m in &mut members {
        m.sort_unstable();
    }

    let dim = task.dim();
    let shards = members
        .into_iter()
        .enumerate()
        .map(|(k, idx)| {
            let offset = (spec.feature_shift > 0.0).then(|| {
                let mut rng = rng_from_seed(derive_seed(&[spec.seed, TAG_SHIFT, k as u64]));
                let z = Array1::from_shape_simple_fn(dim.n, || rng.sample::<f64, _>(StandardNormal));
                let dx = z * spec.feature_shift;
                let dy = task.teacher.dot(&dx);
                (dx, dy)
            });
            let samples = idx
                .into_iter()
                .map(|i| {
                    let s = &task.train[i];
                    match &offset {
                        Some((dx, dy)) => Sample::new(s.id, &s.x + dx, &s.y + dy),
                        None => s.clone(),
                    }
                })
                .collect();
            ClientShard { client_id: k, samples }
        })
        .collect();
    Ok(shards)
}

fn label_skew_members(task: &GlobalTask, k_clients: usize, spec: &SkewSpec) -> Result<Vec<Vec<usize>>> {
    let classes = task.dim().m;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in task.train.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let alpha = 1.0 / spec.label_skew;
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| invalid(format!("label-skew concentration: {e}")))?;
    let mut rng = rng_from_seed(derive_seed(&[spec.seed, TAG_LABELS]));
    let mut members = vec![Vec::new(); k_clients];
    for (c, idx) in by_class.iter_mut().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let order = permutation(idx.len(), derive_seed(&[spec.seed, TAG_LABELS, c as u64]));
        let shuffled: Vec<usize> = order.iter().map(|&o| idx[o]).collect();
        let mut shares: Vec<f64> = (0..k_clients).map(|_| gamma.sample(&mut rng)).collect();
        if shares.iter().sum::<f64>() <= 0.0 {
            shares = vec![1.0; k_clients];
        }
        let mut sizes = largest_remainder(idx.len(), &shares);
        let mut start = 0;
        for (k, sz) in sizes.iter_mut().enumerate() {
            members[k].extend_from_slice(&shuffled[start..start + *sz]);
            start += *sz;
        }
    }
    // every client needs at least one sample
    while let Some(empty) = members.iter().position(Vec::is_empty) {
        let donor = (0..k_clients)
            .max_by(|&i, &j| members[i].len().cmp(&members[j].len()).then(j.cmp(&i)))
            .unwrap();
        let moved = members[donor].pop().unwrap();
        members[empty].push(moved);
    }
    Ok(members)
}

fn largest_remainder(total: usize, shares: &[f64]) -> Vec<usize> {
    let sum: f64 = shares.iter().sum();
    let exact: Vec<f64> = shares.iter().map(|w| total as f64 * w / sum).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - sizes.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..shares.len()).collect();
    by_remainder.sort_by(|&i, &j| {
        let ri = exact[i] - exact[i].floor();
        let rj = exact[j] - exact[j].floor();
        rj.total_cmp(&ri).then(i.cmp(&j))
    });
    for &i in by_remainder.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// `p_k = |D_k| / Σ_j |D_j|`.
pub fn scaling_factors(shards: &[ClientShard]) -> Result<Vec<f64>> {
    if shards.is_empty() {
        return Err(invalid("no shards"));
    }
    if shards.iter().any(|s| s.size() == 0) {
        return Err(invalid("every shard needs at least one sample"));
    }
    let total: usize = shards.iter().map(ClientShard::size).sum();
    Ok(shards
        .iter()
        .map(|s| s.size() as f64 / total as f64)
        .collect())
}

/// Writes shards as comma-separated text, one sample per line:
/// `client_id,x_0,…,x_{n-1},y_0,…,y_{m-1}`. The first line is
/// `# shards m=<m> n=<n>`. Reals use Rust's shortest round-trip formatting.
pub fn write_shards(path: &Path, dim: Dim, shards: &[ClientShard]) -> Result<()> {
    let mut out = format!("# shards m={} n={}\n", dim.m, dim.n);
    for shard in shards {
        for s in &shard.samples {
            write!(out, "{}", shard.client_id).unwrap();
            for v in s.x.iter().chain(s.y.iter()) {
                write!(out, ",{v:?}").unwrap();
            }
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|source| FloraError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads the format written by [`write_shards`]. Sample ids are assigned in
/// file order; labels are recomputed from `y`.
pub fn read_shards(path: &Path) -> Result<(Dim, Vec<ClientShard>)> {
    let text = fs::read_to_string(path).map_err(|source| FloraError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parse_err = |line: usize, message: String| FloraError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
    let dim = parse_shard_header(header).ok_or_else(|| parse_err(1, format!("bad header `{header}`")))?;

    let mut shards: Vec<ClientShard> = Vec::new();
    let mut next_id = 0;
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + dim.n + dim.m {
            return Err(parse_err(
                i + 1,
                format!("expected {} fields, found {}", 1 + dim.n + dim.m, fields.len()),
            ));
        }
        let client_id: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(i + 1, format!("bad client id `{}`", fields[0])))?;
        let values = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| parse_err(i + 1, format!("bad number `{f}`"))))
            .collect::<Result<Vec<_>>>()?;
        let x = Array1::from(values[..dim.n].to_vec());
        let y = Array1::from(values[dim.n..].to_vec());
        let sample = Sample::new(next_id, x, y);
        next_id += 1;
        match shards.iter_mut().find(|s| s.client_id == client_id) {
            Some(shard) => shard.samples.push(sample),
            None => shards.push(ClientShard {
                client_id,
                samples: vec![sample],
            }),
        }
    }
    shards.sort_by_key(|s| s.client_id);
    Ok((dim, shards))
}

fn parse_shard_header(line: &str) -> Option<Dim> {
    let rest = line.strip_prefix("# shards ")?;
    let mut m = None;
    let mut n = None;
    for part in rest.split_whitespace() {
        let (k, v) = part.split_once('=')?;
        match k {
            "m" => m = v.parse().ok(),
            "n" => n = v.parse().ok(),
            _ => return None,
        }
    }
    Dim::new(m?, n?).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn dim16() -> Dim {
        Dim::new(16, 16).unwrap()
    }

    #[test]
    fn noiseless_unit_input_returns_teacher_column() {
        let task = gen_task(Dim::new(3, 4).unwrap(), 10, 0.0, 1).unwrap();
        let mut x = Array1::zeros(4);
        x[2] = 1.0;
        let y = task.teacher.dot(&x);
        assert_eq!(y, task.teacher.column(2).to_owned());
        for s in task.train.iter().chain(&task.eval) {
            assert_eq!(s.y, task.teacher.dot(&s.x));
        }
    }

    #[test]
    fn task_is_deterministic() {
        let a = gen_task(dim16(), 100, 0.1, 9).unwrap();
        let b = gen_task(dim16(), 100, 0.1, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_task(dim16(), 100, 0.1, 10).unwrap());
    }

    #[test]
    fn eval_split_is_twenty_percent() {
        let task = gen_task(dim16(), 1000, 0.1, 0).unwrap();
        assert_eq!(task.eval.len(), 200);
        assert_eq!(task.train.len(), 800);
        let ids: BTreeSet<_> = task.train.iter().chain(&task.eval).map(|s| s.id).collect();
        assert_eq!(ids.len(), 1000);
    }

    #[test]
    fn gen_task_rejects_bad_input() {
        assert!(gen_task(dim16(), 0, 0.1, 0).is_err());
        assert!(gen_task(dim16(), 10, -1.0, 0).is_err());
        assert!(gen_task_with_rank(dim16(), 10, 0.1, 0, 0).is_err());
    }

    #[test]
    fn equal_sizes_without_skew() {
        let task = gen_task(dim16(), 125, 0.1, 3).unwrap();
        let shards = partition(&task, 10, &SkewSpec::iid(3)).unwrap();
        assert!(shards.iter().all(|s| s.size() == 10));
    }

    #[test]
    fn zero_strength_is_iid() {
        let task = gen_task(dim16(), 125, 0.1, 3).unwrap();
        let iid = partition(&task, 10, &SkewSpec::iid(3)).unwrap();
        for kind in [SkewKind::FeatureShift, SkewKind::SizeSkew, SkewKind::LabelSkew] {
            let zero = partition(&task, 10, &SkewSpec::single(kind, 0.0, 3)).unwrap();
            assert_eq!(zero, iid);
        }
    }

    fn assert_exact_cover(task: &GlobalTask, shards: &[ClientShard]) {
        let mut ids: Vec<usize> = shards.iter().flat_map(|s| s.samples.iter().map(|x| x.id)).collect();
        ids.sort_unstable();
        let mut want: Vec<usize> = task.train.iter().map(|s| s.id).collect();
        want.sort_unstable();
        assert_eq!(ids, want);
        assert!(shards.iter().all(|s| s.size() >= 1));
    }

    #[test]
    fn every_skew_partitions_exactly() {
        let task = gen_task(dim16(), 500, 0.1, 4).unwrap();
        let specs = [
            SkewSpec::iid(1),
            SkewSpec::single(SkewKind::FeatureShift, 1.0, 1),
            SkewSpec::single(SkewKind::SizeSkew, 2.0, 1),
            SkewSpec::single(SkewKind::LabelSkew, 5.0, 1),
            SkewSpec::single(SkewKind::FeatureShift, 1.0, 1).with(SkewKind::SizeSkew, 1.0),
        ];
        for spec in &specs {
            for k in [1, 3, 10, 37] {
                assert_exact_cover(&task, &partition(&task, k, spec).unwrap());
            }
        }
    }

    #[test]
    fn size_skew_is_pronounced() {
        let task = gen_task_with_rank(dim16(), 1250, 0.1, 4, 0).unwrap();
        assert_eq!(task.train.len(), 1000);
        for seed in 0..5 {
            let shards = partition(&task, 10, &SkewSpec::single(SkewKind::SizeSkew, 1.5, seed)).unwrap();
            let max = shards.iter().map(ClientShard::size).max().unwrap();
            let min = shards.iter().map(ClientShard::size).min().unwrap();
            assert!(max as f64 / min as f64 > 3.0, "seed {seed}: {max}/{min}");
        }
    }

    #[test]
    fn label_skew_concentrates_classes() {
        let task = gen_task(Dim::new(4, 8).unwrap(), 2000, 0.1, 2).unwrap();
        let distinct = |spec: SkewSpec| -> f64 {
            let shards = partition(&task, 8, &spec).unwrap();
            let counts: Vec<f64> = shards
                .iter()
                .map(|s| {
                    let mut hist = [0usize; 4];
                    s.samples.iter().for_each(|x| hist[x.label] += 1);
                    let top = *hist.iter().max().unwrap();
                    top as f64 / s.size() as f64
                })
                .collect();
            counts.iter().sum::<f64>() / counts.len() as f64
        };
        let iid = distinct(SkewSpec::iid(2));
        let skewed = distinct(SkewSpec::single(SkewKind::LabelSkew, 10.0, 2));
        assert!(skewed > iid + 0.2, "iid {iid}, skewed {skewed}");
    }

    #[test]
    fn feature_shift_keeps_teacher_relation() {
        let task = gen_task(dim16(), 200, 0.0, 5).unwrap();
        let shards = partition(&task, 4, &SkewSpec::single(SkewKind::FeatureShift, 2.0, 5)).unwrap();
        for shard in &shards {
            for s in &shard.samples {
                let err = (&task.teacher.dot(&s.x) - &s.y).iter().fold(0.0f64, |a, v| a.max(v.abs()));
                assert!(err < 1e-12);
            }
        }
    }

    #[test]
    fn partition_errors() {
        let task = gen_task(dim16(), 10, 0.1, 0).unwrap();
        assert!(partition(&task, 0, &SkewSpec::iid(0)).is_err());
        assert!(partition(&task, 9, &SkewSpec::iid(0)).is_err());
        let both = SkewSpec::single(SkewKind::SizeSkew, 1.0, 0).with(SkewKind::LabelSkew, 1.0);
        assert!(partition(&task, 2, &both).is_err());
        assert!(partition(&task, 2, &SkewSpec::single(SkewKind::SizeSkew, -1.0, 0)).is_err());
    }

    fn shard_of(id: usize, size: usize) -> ClientShard {
        let s = Sample::new(0, Array1::zeros(1), Array1::zeros(1));
        ClientShard {
            client_id: id,
            samples: vec![s; size],
        }
    }

    #[test]
    fn scaling_factor_examples() {
        let p = scaling_factors(&[shard_of(0, 15), shard_of(1, 35), shard_of(2, 50)]).unwrap();
        assert_eq!(p, vec![0.15, 0.35, 0.5]);
        let p = scaling_factors(&(0..10).map(|k| shard_of(k, 7)).collect::<Vec<_>>()).unwrap();
        assert!(p.iter().all(|&x| x == 0.1));
        assert_eq!(scaling_factors(&[shard_of(0, 3)]).unwrap(), vec![1.0]);
        assert!(scaling_factors(&[]).is_err());
        assert!(scaling_factors(&[shard_of(0, 0)]).is_err());
    }

    #[test]
    fn scaling_factors_sum_to_one_and_follow_order() {
        let task = gen_task(dim16(), 977, 0.1, 8).unwrap();
        let shards = partition(&task, 7, &SkewSpec::single(SkewKind::SizeSkew, 1.3, 8)).unwrap();
        let p = scaling_factors(&shards).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let mut rev = shards.clone();
        rev.reverse();
        let mut q = scaling_factors(&rev).unwrap();
        q.reverse();
        assert_eq!(p, q);
    }

    #[test]
    fn shard_file_round_trip() {
        let task = gen_task(Dim::new(3, 2).unwrap(), 40, 0.3, 6).unwrap();
        let shards = partition(&task, 3, &SkewSpec::single(SkewKind::FeatureShift, 0.7, 6)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shards.csv");
        write_shards(&path, task.dim(), &shards).unwrap();
        let (dim, back) = read_shards(&path).unwrap();
        assert_eq!(dim, task.dim());
        assert_eq!(back.len(), shards.len());
        for (a, b) in shards.iter().zip(&back) {
            assert_eq!(a.client_id, b.client_id);
            let xa: Vec<_> = a.samples.iter().map(|s| (&s.x, &s.y, s.label)).collect();
            let xb: Vec<_> = b.samples.iter().map(|s| (&s.x, &s.y, s.label)).collect();
            assert_eq!(xa, xb);
        }
    }

    #[test]
    fn shard_file_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "# shards m=1 n=1\n0,1.0\n").unwrap();
        assert!(matches!(read_shards(&path), Err(FloraError::Parse { line: 2, .. })));
        assert!(matches!(read_shards(&dir.path().join("missing")), Err(FloraError::Io { .. })));
    }
}
