//! Datasets, synthetic generators and client partitioning.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{Batch, Targets};
use crate::rng::{keyed_rng, stream_key, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Batch,
    classes: usize,
    provenance: String,
}

impl Dataset {
    pub fn new(samples: Batch, classes: usize, provenance: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Targets::Classes(labels) = samples.targets() {
            if let Some((i, y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
                return Err(Error::Validation(format!(
                    "sample {i} has label {y} outside [0, {classes})"
                )));
            }
        }
        Ok(Dataset {
            samples,
            classes,
            provenance: provenance.into(),
        })
    }

    pub fn samples(&self) -> &Batch {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.dim()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self.samples.targets() {
            Targets::Classes(c) => Some(c),
            Targets::Real { .. } => None,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.samples.select(indices),
            self.classes,
            format!("{}[subset]", self.provenance),
        )
    }
}

/// Reads `d` features followed by one integer label per line, no header.
pub fn load_csv(path: impl AsRef<Path>, d: usize, k: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Validation(format!("{other:?}")),
        })?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        if record.len() != d + 1 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", d + 1, record.len()),
            ));
        }
        for field in record.iter().take(d) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("`{field}` is not a number")))?;
            features.push(v);
        }
        let raw = record[d].trim();
        let label: usize = raw
            .parse()
            .map_err(|_| parse_err(line, format!("`{raw}` is not a class label")))?;
        if label >= k {
            return Err(Error::Validation(format!(
                "{}:{line}: label {label} outside [0, {k})",
                path.display()
            )));
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Validation(format!("{}: no samples", path.display())));
    }
    let batch = Batch::new(features, d, Targets::Classes(labels))?;
    Dataset::new(batch, k, path.display().to_string())
}

/// Inverse of [`load_csv`]; floats use the shortest exact representation.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Validation("only class-labelled datasets export to csv".into()))?;
    let mut out =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for (s, y) in labels.iter().enumerate() {
        let mut line = String::new();
        for v in dataset.samples().row(s) {
            line.push_str(&format!("{v},"));
        }
        line.push_str(&format!("{y}\n"));
        out.write_all(line.as_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobParams {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub noise: f64,
}

/// Gaussian blobs: class `c` is centred at `separation * e_c`.
pub fn gen_blobs(p: &BlobParams, seed: u64) -> Result<Dataset> {
    if p.classes < 2 || p.dim < p.classes || p.per_class == 0 {
        return Err(Error::Validation(format!(
            "blobs need 2 <= classes <= dim and per_class >= 1 (got k={}, d={}, per_class={})",
            p.classes, p.dim, p.per_class
        )));
    }
    let mut rng = keyed_rng(seed, Stream::Blobs, &[]);
    let n = p.classes * p.per_class;
    let mut features = Vec::with_capacity(n * p.dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..p.classes {
        for _ in 0..p.per_class {
            for j in 0..p.dim {
                let mean = if j == c { p.separation } else { 0.0 };
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(mean + p.noise * z);
            }
            labels.push(c);
        }
    }
    let batch = Batch::new(features, p.dim, Targets::Classes(labels))?;
    Dataset::new(batch, p.classes, format!("blobs(seed={seed})"))
}

/// One client's slice of the training set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientShard {
    pub client: usize,
    pub indices: Vec<usize>,
    pub stream_key: u64,
}

fn shard(client: usize, indices: Vec<usize>, seed: u64) -> ClientShard {
    ClientShard {
        client,
        indices,
        stream_key: stream_key(seed, Stream::Partition, &[client as u64]),
    }
}

/// Shuffled split into `n` contiguous shards whose sizes differ by at most one.
pub fn partition_iid(dataset: &Dataset, n: usize, seed: u64) -> Result<Vec<ClientShard>> {
    let total = dataset.len();
    if n == 0 || total < n {
        return Err(Error::Partition(format!(
            "{total} samples cannot feed {n} clients"
        )));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut keyed_rng(seed, Stream::Partition, &[0]));
    let (base, extra) = (total / n, total % n);
    let mut start = 0;
    Ok((0..n)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let s = shard(i, order[start..start + len].to_vec(), seed);
            start += len;
            s
        })
        .collect())
}

/// Class-shard non-IID split: each client receives `per_client` chunks from
/// that many distinct classes.
///
/// The `n * per_client` chunks are spread over the classes present, each
/// class's (shuffled) samples are cut into equal contiguous chunks with the
/// last chunk taking the remainder, and chunks listed class by class are
/// dealt with stride `n`. A class owns at most `n` consecutive chunks, so
/// the stride guarantees distinct classes per client.
pub fn partition_label_shards(
    dataset: &Dataset,
    n: usize,
    per_client: usize,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Partition("label shards need class labels".into()))?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes()];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    by_class.retain(|c| !c.is_empty());
    let k = by_class.len();
    if n == 0 || per_client == 0 {
        return Err(Error::Partition(
            "need at least one client and one class per client".into(),
        ));
    }
    if per_client > k {
        return Err(Error::Partition(format!(
            "{per_client} classes per client but only {k} classes present"
        )));
    }
    let chunks_total = n * per_client;
    if chunks_total < k {
        return Err(Error::Partition(format!(
            "{n} clients x {per_client} classes cannot cover {k} classes"
        )));
    }

    let mut rng = keyed_rng(seed, Stream::Partition, &[1]);
    let mut class_order: Vec<usize> = (0..k).collect();
    class_order.shuffle(&mut rng);

    let mut chunks: Vec<Vec<usize>> = Vec::with_capacity(chunks_total);
    for (rank, &c) in class_order.iter().enumerate() {
        let count = chunks_total / k + usize::from(rank < chunks_total % k);
        let members = &mut by_class[c];
        if members.len() < count {
            return Err(Error::Partition(format!(
                "class with {} samples cannot be cut into {count} chunks",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let size = members.len() / count;
        for j in 0..count {
            let end = if j + 1 == count {
                members.len()
            } else {
                (j + 1) * size
            };
            chunks.push(members[j * size..end].to_vec());
        }
    }

    let mut owners: Vec<usize> = (0..n).collect();
    owners.shuffle(&mut rng);
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (pos, chunk) in chunks.into_iter().enumerate() {
        assigned[owners[pos % n]].extend(chunk);
    }
    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(i, idx)| shard(i, idx, seed))
        .collect())
}

/// Index batches for one local epoch: a fresh permutation keyed by
/// `(seed, shard, epoch)`, cut into batches of `batch_size` with a short tail.
pub fn minibatch_indices(
    shard: &ClientShard,
    batch_size: usize,
    epoch: u64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if shard.indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be at least 1".into()));
    }
    let mut order = shard.indices.clone();
    order.shuffle(&mut keyed_rng(
        seed,
        Stream::Minibatch,
        &[shard.stream_key, epoch],
    ));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn minibatch_stream(
    dataset: &Dataset,
    shard: &ClientShard,
    batch_size: usize,
    epoch: u64,
    seed: u64,
) -> Result<Vec<Batch>> {
    Ok(minibatch_indices(shard, batch_size, epoch, seed)?
        .iter()
        .map(|idx| dataset.samples().select(idx))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn labelled(labels: Vec<usize>, k: usize) -> Dataset {
        let n = labels.len();
        let batch = Batch::new(
            (0..n).map(|i| i as f64).collect(),
            1,
            Targets::Classes(labels),
        )
        .unwrap();
        Dataset::new(batch, k, "t").unwrap()
    }

    fn assert_cover(shards: &[ClientShard], total: usize) {
        let mut seen = BTreeSet::new();
        for s in shards {
            assert!(!s.indices.is_empty());
            for &i in &s.indices {
                assert!(seen.insert(i), "index {i} assigned twice");
            }
        }
        assert_eq!(seen, (0..total).collect());
    }

    #[test]
    fn csv_parse_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "1,0,1\n0,1,0\n").unwrap();
        let ds = load_csv(&p, 2, 2).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels().unwrap(), &[1, 0]);
        assert_eq!(ds.samples().row(0), &[1.0, 0.0]);

        std::fs::write(&p, "").unwrap();
        assert!(matches!(load_csv(&p, 2, 2), Err(Error::Validation(_))));

        std::fs::write(&p, "1,0,1\n0,x,0\n").unwrap();
        match load_csv(&p, 2, 2) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "1,0,1\n0,1\n").unwrap();
        assert!(matches!(
            load_csv(&p, 2, 2),
            Err(Error::Parse { line: 2, .. })
        ));
        std::fs::write(&p, "1,0,5\n").unwrap();
        assert!(matches!(load_csv(&p, 2, 2), Err(Error::Validation(_))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("blobs.csv");
        let params = BlobParams {
            classes: 3,
            dim: 4,
            per_class: 7,
            separation: 2.5,
            noise: 0.7,
        };
        let ds = gen_blobs(&params, 42).unwrap();
        write_csv(&ds, &p).unwrap();
        let back = load_csv(&p, 4, 3).unwrap();
        assert_eq!(back.samples(), ds.samples());
    }

    #[test]
    fn blobs_without_noise_sit_on_means() {
        let params = BlobParams {
            classes: 3,
            dim: 5,
            per_class: 4,
            separation: 3.0,
            noise: 0.0,
        };
        let ds = gen_blobs(&params, 1).unwrap();
        for (s, &y) in ds.labels().unwrap().iter().enumerate() {
            for (j, &v) in ds.samples().row(s).iter().enumerate() {
                assert_eq!(v, if j == y { 3.0 } else { 0.0 });
            }
        }
        assert_eq!(gen_blobs(&params, 1).unwrap(), ds);
        assert!(gen_blobs(&BlobParams { dim: 2, ..params }, 1).is_err());
    }

    #[test]
    fn iid_sizes() {
        let ds = labelled(vec![0; 10], 1);
        let shards = partition_iid(&ds, 5, 3).unwrap();
        assert!(shards.iter().all(|s| s.indices.len() == 2));
        assert_cover(&shards, 10);

        let ds = labelled(vec![0; 11], 1);
        let shards = partition_iid(&ds, 5, 3).unwrap();
        let mut sizes: Vec<_> = shards.iter().map(|s| s.indices.len()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
        assert_cover(&shards, 11);
        assert!(partition_iid(&ds, 12, 3).is_err());
    }

    #[test]
    fn iid_shards_follow_global_histogram() {
        let labels: Vec<usize> = (0..10_000).map(|i| i % 10).collect();
        let ds = labelled(labels.clone(), 10);
        let shards = partition_iid(&ds, 10, 5).unwrap();
        for s in &shards {
            let mut counts = [0f64; 10];
            for &i in &s.indices {
                counts[labels[i]] += 1.0;
            }
            let expected = s.indices.len() as f64 / 10.0;
            let chi2: f64 = counts
                .iter()
                .map(|c| (c - expected).powi(2) / expected)
                .sum();
            // 9 degrees of freedom, p = 0.001 critical value
            assert!(chi2 < 27.88, "chi2 = {chi2}");
        }
    }

    #[test]
    fn label_shards_two_classes_each() {
        let labels: Vec<usize> = (0..1000).map(|i| i % 10).collect();
        let ds = labelled(labels.clone(), 10);
        let shards = partition_label_shards(&ds, 5, 2, 9).unwrap();
        assert_cover(&shards, 1000);
        for s in &shards {
            let classes: BTreeSet<_> = s.indices.iter().map(|&i| labels[i]).collect();
            assert_eq!(classes.len(), 2);
        }
        let single = partition_label_shards(&ds, 1, 10, 9).unwrap();
        assert_eq!(single[0].indices.len(), 1000);
    }

    #[test]
    fn label_shards_infeasible() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let ds = labelled(labels, 10);
        assert!(matches!(
            partition_label_shards(&ds, 4, 2, 0),
            Err(Error::Partition(_))
        ));
        assert!(matches!(
            partition_label_shards(&ds, 4, 11, 0),
            Err(Error::Partition(_))
        ));
        // 10 samples per class cannot be cut into 20 chunks
        assert!(matches!(
            partition_label_shards(&ds, 100, 2, 0),
            Err(Error::Partition(_))
        ));
    }

    #[test]
    fn minibatch_examples() {
        let s = ClientShard {
            client: 0,
            indices: (0..5).collect(),
            stream_key: 77,
        };
        let sizes: Vec<_> = minibatch_indices(&s, 2, 0, 1)
            .unwrap()
            .iter()
            .map(Vec::len)
            .collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        assert_eq!(minibatch_indices(&s, 9, 0, 1).unwrap().len(), 1);
        assert_eq!(
            minibatch_indices(&s, 2, 3, 1).unwrap(),
            minibatch_indices(&s, 2, 3, 1).unwrap()
        );
        let big = ClientShard {
            client: 0,
            indices: (0..50).collect(),
            stream_key: 77,
        };
        assert_ne!(
            minibatch_indices(&big, 50, 0, 1).unwrap(),
            minibatch_indices(&big, 50, 1, 1).unwrap()
        );
        let empty = ClientShard {
            client: 0,
            indices: vec![],
            stream_key: 0,
        };
        assert!(minibatch_indices(&empty, 2, 0, 1).is_err());
    }

    proptest! {
        #[test]
        fn partitions_cover_exactly(n in 1usize..12, c in 1usize..5, k in 2usize..8, per in 12usize..30, seed in any::<u64>()) {
            let labels: Vec<usize> = (0..k * per).map(|i| i % k).collect();
            let ds = labelled(labels.clone(), k);
            let iid = partition_iid(&ds, n, seed).unwrap();
            assert_cover(&iid, k * per);
            if c <= k && n * c >= k && n * c <= k * per {
                let shards = partition_label_shards(&ds, n, c, seed).unwrap();
                assert_cover(&shards, k * per);
                for s in &shards {
                    let classes: BTreeSet<_> = s.indices.iter().map(|&i| labels[i]).collect();
                    prop_assert_eq!(classes.len(), c);
                }
                prop_assert_eq!(shards, partition_label_shards(&ds, n, c, seed).unwrap());
            }
        }

        #[test]
        fn epoch_visits_each_index_once(len in 1usize..200, b in 1usize..64, epoch in any::<u64>()) {
            let s = ClientShard { client: 3, indices: (100..100 + len).collect(), stream_key: 5 };
            let mut all: Vec<usize> = minibatch_indices(&s, b, epoch, 2).unwrap().concat();
            all.sort();
            prop_assert_eq!(all, s.indices);
        }
    }
}
