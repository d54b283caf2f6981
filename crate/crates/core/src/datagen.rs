//! Federated dataset construction: the Synthetic(alpha, beta) generator, label-shard and
//! Dirichlet partitioners, IDX ingestion, and CSV export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Batch;

/// Share of each client's examples held out for testing.
pub const TEST_FRACTION: f64 = 0.25;

/// Log-normal spread of per-client sample counts.
const SIZE_SIGMA: f64 = 0.5;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub train: Batch,
    pub test: Batch,
    /// Source row of each train/test example: an index into the partitioned batch, or
    /// into the client's own generated sample stream for synthetic data.
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl ClientData {
    pub fn label_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = self.train.label_histogram(num_classes);
        for (a, b) in h.iter_mut().zip(self.test.label_histogram(num_classes)) {
            *a += b;
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub clients: Vec<ClientData>,
    pub num_classes: usize,
    pub input_dim: usize,
    pub provenance: String,
}

impl FederatedDataset {
    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::Empty("federated dataset has no clients"));
        }
        for (k, c) in self.clients.iter().enumerate() {
            if c.train.is_empty() || c.test.is_empty() {
                return Err(Error::invalid(format!(
                    "client {k} has an empty train or test split"
                )));
            }
            let labels = c.train.labels.iter().chain(&c.test.labels);
            if labels.into_iter().any(|&l| l >= self.num_classes) {
                return Err(Error::invalid(format!("client {k} has an out-of-range label")));
            }
        }
        Ok(())
    }

    /// Normalized label histogram of every client (train and test together).
    pub fn label_distributions(&self) -> Vec<Vec<f64>> {
        self.clients
            .iter()
            .map(|c| {
                let h = c.label_histogram(self.num_classes);
                let n: usize = h.iter().sum();
                h.into_iter().map(|v| v as f64 / n as f64).collect()
            })
            .collect()
    }

    /// Column order: `client_id, split, label, x_0 .. x_{d-1}`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["client_id".to_string(), "split".into(), "label".into()];
        header.extend((0..self.input_dim).map(|j| format!("x_{j}")));
        w.write_record(&header)?;
        for (k, c) in self.clients.iter().enumerate() {
            for (split, batch) in [("train", &c.train), ("test", &c.test)] {
                for (row, &label) in batch.inputs.rows().into_iter().zip(&batch.labels) {
                    let mut rec = vec![k.to_string(), split.to_string(), label.to_string()];
                    rec.extend(row.iter().map(|v| format!("{v:e}")));
                    w.write_record(&rec)?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_clients: usize,
    pub alpha_bar: f64,
    pub beta_bar: f64,
    pub input_dim: usize,
    pub num_classes: usize,
    pub min_samples: usize,
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_clients: 100,
            alpha_bar: 0.5,
            beta_bar: 0.5,
            input_dim: 60,
            num_classes: 10,
            min_samples: 50,
            max_samples: 1000,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::invalid("n_clients must be >= 1"));
        }
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(Error::invalid("input_dim must be >= 1 and num_classes >= 2"));
        }
        if !(self.alpha_bar >= 0.0 && self.beta_bar >= 0.0) {
            return Err(Error::invalid("alpha_bar and beta_bar must be >= 0"));
        }
        if self.min_samples < 2 || self.min_samples > self.max_samples {
            return Err(Error::invalid(
                "sample range must satisfy 2 <= min_samples <= max_samples",
            ));
        }
        Ok(())
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Synthetic(alpha, beta): a shared base softmax model `(W0, b0)` and input mean `v0`,
/// each client perturbing them by `N(0, alpha^2)` (model) and `N(0, beta^2)` (input mean).
/// Inputs are `N(v_k, diag(j^-1.2))`, labels the argmax of `W_k x + b_k`.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<FederatedDataset> {
    cfg.validate()?;
    let (d, c) = (cfg.input_dim, cfg.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let w0 = Array2::from_shape_simple_fn((c, d), || normal(&mut rng));
    let b0: Vec<f64> = (0..c).map(|_| normal(&mut rng)).collect();
    let v0: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
    let std_x: Vec<f64> = (1..=d).map(|j| (j as f64).powf(-1.2).sqrt()).collect();
    let median = ((cfg.min_samples * cfg.max_samples) as f64).sqrt();

    let mut clients = Vec::with_capacity(cfg.n_clients);
    for _ in 0..cfg.n_clients {
        let w = w0.mapv(|v| v + cfg.alpha_bar * normal(&mut rng));
        let b: Vec<f64> = b0.iter().map(|v| v + cfg.alpha_bar * normal(&mut rng)).collect();
        let v: Vec<f64> = v0.iter().map(|x| x + cfg.beta_bar * normal(&mut rng)).collect();

        let size = (median * (SIZE_SIGMA * normal(&mut rng)).exp()).round() as usize;
        let n = size.clamp(cfg.min_samples, cfg.max_samples);

        let inputs =
            Array2::from_shape_fn((n, d), |(_, j)| v[j] + std_x[j] * normal(&mut rng));
        let logits = inputs.dot(&w.t());
        let labels: Vec<usize> = logits
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for k in 1..c {
                    if row[k] + b[k] > row[best] + b[best] {
                        best = k;
                    }
                }
                best
            })
            .collect();
        let all = Batch::new(inputs, labels)?;
        let own: Vec<usize> = (0..n).collect();
        clients.push(materialize(&all, &own, &mut rng)?);
    }

    let ds = FederatedDataset {
        clients,
        num_classes: c,
        input_dim: d,
        provenance: format!(
            "synthetic(alpha_bar={}, beta_bar={}, clients={}, dim={}, classes={}, \
             samples=[{}, {}], seed={}; W_k=W0+alpha*N(0,1), v_k=v0+beta*N(0,1), \
             Sigma_jj=j^-1.2)",
            cfg.alpha_bar,
            cfg.beta_bar,
            cfg.n_clients,
            d,
            c,
            cfg.min_samples,
            cfg.max_samples,
            cfg.seed
        ),
    };
    ds.validate()?;
    Ok(ds)
}

/// Stratified train/test split of `labels` (positions into it), sorted ascending.
fn stratified_split<R: Rng + ?Sized>(labels: &[usize], rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for members in groups.values_mut() {
        members.shuffle(rng);
        let k = (members.len() as f64 * TEST_FRACTION).round() as usize;
        test.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    if labels.len() >= 2 {
        // tiny label groups can round every example to one side
        if test.is_empty() {
            test.push(train.pop().expect("at least two examples"));
        } else if train.is_empty() {
            train.push(test.pop().expect("at least two examples"));
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Splits the rows `indices` of `source` into one client's train/test batches.
fn materialize<R: Rng + ?Sized>(
    source: &Batch,
    indices: &[usize],
    rng: &mut R,
) -> Result<ClientData> {
    if indices.len() < 2 {
        return Err(Error::Infeasible(format!(
            "a client received {} example(s); at least 2 are needed for a train/test split",
            indices.len()
        )));
    }
    let labels: Vec<usize> = indices.iter().map(|&i| source.labels[i]).collect();
    let (tr, te) = stratified_split(&labels, rng);
    let train_indices: Vec<usize> = tr.iter().map(|&p| indices[p]).collect();
    let test_indices: Vec<usize> = te.iter().map(|&p| indices[p]).collect();
    Ok(ClientData {
        train: source.select(&train_indices),
        test: source.select(&test_indices),
        train_indices,
        test_indices,
    })
}

fn num_classes_of(data: &Batch) -> Result<usize> {
    data.labels
        .iter()
        .max()
        .map(|m| m + 1)
        .ok_or(Error::Empty("dataset to partition"))
}

fn indices_by_class(data: &Batch, num_classes: usize) -> Vec<Vec<usize>> {
    let mut by = vec![Vec::new(); num_classes];
    for (i, &l) in data.labels.iter().enumerate() {
        by[l].push(i);
    }
    by
}

/// Splits `total` into `weights.len()` integer parts, each at least `floor`,
/// the remainder by largest fractional share.
fn apportion(total: usize, weights: &[f64], floor: usize) -> Vec<usize> {
    let k = weights.len();
    let spare = total - floor * k;
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * spare as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = spare - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts.iter().map(|c| c + floor).collect()
}

/// Labels held by client `i`: consecutive classes starting at `i` when there are at
/// least as many clients as classes, otherwise consecutive blocks of `per_client`.
fn shard_labels(i: usize, n_clients: usize, per_client: usize, num_classes: usize) -> Vec<usize> {
    let start = if n_clients >= num_classes { i } else { i * per_client };
    (0..per_client).map(|j| (start + j) % num_classes).collect()
}

/// Label-shard partition: each client holds examples of exactly `labels_per_client`
/// classes, with unequal (log-normal) shares of each class among its holders.
pub fn shard_partition(
    data: &Batch,
    n_clients: usize,
    labels_per_client: usize,
    seed: u64,
) -> Result<FederatedDataset> {
    let num_classes = num_classes_of(data)?;
    if n_clients == 0 {
        return Err(Error::invalid("n_clients must be >= 1"));
    }
    if labels_per_client == 0 || labels_per_client > num_classes {
        return Err(Error::Infeasible(format!(
            "labels_per_client={labels_per_client} with {num_classes} classes"
        )));
    }
    if labels_per_client * n_clients < num_classes {
        return Err(Error::Infeasible(format!(
            "{n_clients} clients x {labels_per_client} labels cannot cover {num_classes} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_class = indices_by_class(data, num_classes);

    let client_labels: Vec<Vec<usize>> = (0..n_clients)
        .map(|i| shard_labels(i, n_clients, labels_per_client, num_classes))
        .collect();
    let mut holders = vec![Vec::new(); num_classes];
    for (i, ls) in client_labels.iter().enumerate() {
        for &l in ls {
            holders[l].push(i);
        }
    }

    // every client needs two examples overall for its train/test split
    let floor = 2usize.div_ceil(labels_per_client);
    let mut assigned = vec![Vec::new(); n_clients];
    for (l, hs) in holders.iter().enumerate() {
        let mut members = by_class[l].clone();
        if members.len() < floor * hs.len() {
            return Err(Error::Infeasible(format!(
                "class {l} has {} examples for {} holders",
                members.len(),
                hs.len()
            )));
        }
        members.shuffle(&mut rng);
        let weights: Vec<f64> = hs
            .iter()
            .map(|_| (SIZE_SIGMA * normal(&mut rng)).exp())
            .collect();
        let counts = apportion(members.len(), &weights, floor);
        let mut at = 0;
        for (&h, &cnt) in hs.iter().zip(&counts) {
            assigned[h].extend_from_slice(&members[at..at + cnt]);
            at += cnt;
        }
    }

    let clients = assigned
        .iter()
        .map(|idx| materialize(data, idx, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let ds = FederatedDataset {
        clients,
        num_classes,
        input_dim: data.input_dim(),
        provenance: format!(
            "shards(clients={n_clients}, labels_per_client={labels_per_client}, seed={seed})"
        ),
    };
    ds.validate()?;
    Ok(ds)
}

/// Dirichlet partition: for every class, client shares ~ Dir(alpha * 1).
pub fn dirichlet_partition(
    data: &Batch,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<FederatedDataset> {
    const MAX_ATTEMPTS: usize = 1000;
    let num_classes = num_classes_of(data)?;
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    if n_clients == 0 {
        return Err(Error::invalid("n_clients must be >= 1"));
    }
    if data.len() < 2 * n_clients {
        return Err(Error::Infeasible(format!(
            "{} examples cannot give {n_clients} clients two examples each",
            data.len()
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_class = indices_by_class(data, num_classes);

    for _ in 0..MAX_ATTEMPTS {
        let mut assigned = vec![Vec::new(); n_clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let mut props: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = props.iter().sum();
            if !(total > 0.0) {
                // all draws underflowed; hand the class to one client
                props.iter_mut().for_each(|p| *p = 0.0);
                props[rng.random_range(0..n_clients)] = 1.0;
            } else {
                props.iter_mut().for_each(|p| *p /= total);
            }
            let n = members.len();
            let mut cum = 0.0;
            let mut start = 0;
            for (k, p) in props.iter().enumerate() {
                cum += p;
                let end = if k + 1 == n_clients {
                    n
                } else {
                    ((cum * n as f64).round() as usize).min(n)
                };
                assigned[k].extend_from_slice(&members[start..end.max(start)]);
                start = end.max(start);
            }
        }
        if assigned.iter().all(|a| a.len() >= 2) {
            let clients = assigned
                .iter()
                .map(|idx| materialize(data, idx, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let ds = FederatedDataset {
                clients,
                num_classes,
                input_dim: data.input_dim(),
                provenance: format!("dirichlet(clients={n_clients}, alpha={alpha}, seed={seed})"),
            };
            ds.validate()?;
            return Ok(ds);
        }
    }
    Err(Error::Infeasible(format!(
        "no Dirichlet draw gave every client two examples after {MAX_ATTEMPTS} attempts"
    )))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            needed: at + 4,
            have: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn require_len(bytes: &[u8], needed: usize, path: &Path) -> Result<()> {
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            have: bytes.len(),
        });
    }
    Ok(())
}

/// Reads an IDX image/label file pair (uncompressed, big-endian headers).
/// Pixels are scaled to [0, 1] and images flattened row-major.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Batch> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = read_file(ip)?;
    check_magic(&img, IMAGES_MAGIC, ip)?;
    let n_img = be_u32(&img, 4, ip)? as usize;
    let rows = be_u32(&img, 8, ip)? as usize;
    let cols = be_u32(&img, 12, ip)? as usize;
    let dim = rows * cols;
    require_len(&img, 16 + n_img * dim, ip)?;

    let lab = read_file(lp)?;
    check_magic(&lab, LABELS_MAGIC, lp)?;
    let n_lab = be_u32(&lab, 4, lp)? as usize;
    require_len(&lab, 8 + n_lab, lp)?;

    if n_img != n_lab {
        return Err(Error::CountMismatch {
            images: n_img,
            labels: n_lab,
        });
    }
    let pixels: Vec<f64> = img[16..16 + n_img * dim]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let inputs = Array2::from_shape_vec((n_img, dim), pixels).expect("checked length");
    let labels = lab[8..8 + n_lab].iter().map(|&b| b as usize).collect();
    Batch::new(inputs, labels)
}

/// Stacks batches with equal input width.
pub fn concat_batches(parts: &[Batch]) -> Result<Batch> {
    let views: Vec<_> = parts.iter().map(|b| b.inputs.view()).collect();
    let inputs = concatenate(Axis(0), &views)
        .map_err(|e| Error::invalid(format!("cannot stack batches: {e}")))?;
    let labels = parts.iter().flat_map(|b| b.labels.iter().copied()).collect();
    Batch::new(inputs, labels)
}

/// Total-variation distance between two distributions on the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
