//! Trajectory datasets: the `QTRJ` binary container, normalization
//! statistics, train/eval splitting and length-bucketed batching.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "QTRJ" | u16 version | u32 manifest_len | manifest (UTF-8 JSON)
//! records: u8 prep_axis | u8 y0 | u8 meas_axis | u8 yT | u16 steps | steps × f32
//! u32 CRC-32 of the record section
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::qubit::{Axis, Label, MeasLabel, PrepLabel};
use crate::sim::{SimConfig, SimulatedShot};

pub const MAGIC: [u8; 4] = *b"QTRJ";
pub const VERSION: u16 = 1;
pub const DEFAULT_BATCH_SIZE: usize = 1024;
pub const MAX_STEPS: usize = u16::MAX as usize;

const HEADER_LEN: usize = 4 + 2 + 4;
const RECORD_HEADER_LEN: usize = 6;

/// Mean and standard deviation of the raw voltage samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn from_samples<'a>(samples: impl Iterator<Item = &'a f32>) -> Result<NormStats> {
        // Welford accumulation in f64
        let (mut n, mut mean, mut m2) = (0u64, 0.0f64, 0.0f64);
        for &v in samples {
            n += 1;
            let v = f64::from(v);
            let delta = v - mean;
            mean += delta / n as f64;
            m2 += delta * (v - mean);
        }
        if n < 2 {
            return Err(Error::invalid("normalization needs at least two samples"));
        }
        let std = (m2 / n as f64).sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::numeric("voltage samples have zero variance"));
        }
        Ok(NormStats { mean, std })
    }

    #[inline]
    pub fn apply(&self, v: f32) -> f64 {
        (f64::from(v) - self.mean) / self.std
    }

    fn validate(&self) -> Result<()> {
        if self.mean.is_finite() && self.std.is_finite() && self.std > 0.0 {
            Ok(())
        } else {
            Err(FormatError::Manifest(format!("invalid normalization {self:?}")).into())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub record_count: u64,
    pub sample_count: u64,
    /// Statistics of the stored samples; absent for datasets with fewer than
    /// two samples or zero variance.
    pub normalization: Option<NormStats>,
    /// Set when the stored samples were z-scored; `applied` holds the
    /// statistics that were subtracted and divided out.
    pub applied: Option<NormStats>,
    pub config: Option<SimConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub prep: PrepLabel,
    pub meas: MeasLabel,
    pub voltages: Vec<f32>,
}

impl TrajectoryRecord {
    pub fn step_count(&self) -> usize {
        self.voltages.len()
    }

    pub fn voltages_f64(&self) -> Vec<f64> {
        self.voltages.iter().map(|&v| f64::from(v)).collect()
    }
}

impl From<&SimulatedShot> for TrajectoryRecord {
    fn from(shot: &SimulatedShot) -> Self {
        TrajectoryRecord {
            prep: shot.prep,
            meas: shot.meas,
            voltages: shot.record.samples.iter().map(|&v| v as f32).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<TrajectoryRecord>,
}

impl Dataset {
    /// Builds a dataset and its manifest (counts and sample statistics).
    pub fn new(config: Option<SimConfig>, records: Vec<TrajectoryRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.voltages.len() > MAX_STEPS {
                return Err(Error::invalid(format!("record {i} has more than {MAX_STEPS} steps")));
            }
            if r.voltages.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("record {i} contains non-finite samples")));
            }
        }
        let sample_count = records.iter().map(|r| r.voltages.len() as u64).sum();
        let normalization = NormStats::from_samples(records.iter().flat_map(|r| &r.voltages)).ok();
        Ok(Dataset {
            manifest: Manifest {
                record_count: records.len() as u64,
                sample_count,
                normalization,
                applied: None,
                config,
            },
            records,
        })
    }

    pub fn from_shots(config: &SimConfig, shots: &[SimulatedShot]) -> Result<Self> {
        Dataset::new(Some(config.clone()), shots.iter().map(TrajectoryRecord::from).collect())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sample statistics, failing when they are undefined.
    pub fn norm_stats(&self) -> Result<NormStats> {
        self.manifest.normalization.ok_or_else(|| Error::numeric("dataset has no usable normalization statistics"))
    }

    fn with_records(&self, records: Vec<TrajectoryRecord>) -> Result<Dataset> {
        let mut out = Dataset::new(self.manifest.config.clone(), records)?;
        out.manifest.applied = self.manifest.applied;
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let manifest_len = u32::try_from(manifest.len()).map_err(|_| Error::invalid("manifest larger than 4 GiB"))?;
        let body: usize = self.records.iter().map(|r| RECORD_HEADER_LEN + 4 * r.voltages.len()).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + body + 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&manifest_len.to_le_bytes());
        out.extend_from_slice(&manifest);
        let records_start = out.len();
        for r in &self.records {
            let steps =
                u16::try_from(r.voltages.len()).map_err(|_| Error::invalid("record longer than 65535 steps"))?;
            out.extend_from_slice(&[
                r.prep.axis().index() as u8,
                r.prep.bit(),
                r.meas.axis().index() as u8,
                r.meas.bit(),
            ]);
            out.extend_from_slice(&steps.to_le_bytes());
            for v in &r.voltages {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[records_start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Decodes a complete container. Any corruption is reported as an error;
    /// no partially decoded dataset is returned.
    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic).into());
        }
        let version = cur.u16()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let manifest_len = cur.u32()? as usize;
        let manifest_bytes = cur.take(manifest_len)?;
        let manifest: Manifest =
            serde_json::from_slice(manifest_bytes).map_err(|e| FormatError::Manifest(e.to_string()))?;
        if let Some(stats) = manifest.normalization {
            stats.validate()?;
        }
        if let Some(stats) = manifest.applied {
            stats.validate()?;
        }
        if let Some(cfg) = &manifest.config {
            cfg.validate().map_err(|e| FormatError::Manifest(e.to_string()))?;
        }

        let records_start = cur.pos;
        let remaining = bytes.len().saturating_sub(records_start);
        let max_records = remaining / RECORD_HEADER_LEN;
        let record_count = usize::try_from(manifest.record_count).ok().filter(|&n| n <= max_records).ok_or(
            FormatError::Truncated {
                offset: records_start,
                needed: (manifest.record_count as usize).saturating_mul(RECORD_HEADER_LEN),
                available: remaining,
            },
        )?;
        let mut records = Vec::with_capacity(record_count);
        let mut sample_count = 0u64;
        for index in 0..record_count {
            let head = cur.take(RECORD_HEADER_LEN)?;
            let label = |axis: u8, bit: u8| -> Result<Label> {
                let axis = Axis::from_index(axis as usize)
                    .ok_or_else(|| FormatError::Record { index, reason: format!("axis byte {axis}") })?;
                Label::from_bit(axis, bit)
                    .map_err(|_| FormatError::Record { index, reason: format!("bit byte {bit}") }.into())
            };
            let prep = label(head[0], head[1])?;
            let meas = label(head[2], head[3])?;
            let steps = u16::from_le_bytes([head[4], head[5]]) as usize;
            let raw = cur.take(4 * steps)?;
            let voltages: Vec<f32> =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            if voltages.iter().any(|v| !v.is_finite()) {
                return Err(FormatError::Record { index, reason: "non-finite sample".into() }.into());
            }
            sample_count += steps as u64;
            records.push(TrajectoryRecord { prep, meas, voltages });
        }
        let records_end = cur.pos;
        let stored = cur.u32()?;
        let computed = crc32fast::hash(&bytes[records_start..records_end]);
        if stored != computed {
            return Err(FormatError::Checksum { stored, computed }.into());
        }
        if cur.pos != bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - cur.pos).into());
        }
        if sample_count != manifest.sample_count {
            return Err(FormatError::Manifest(format!(
                "manifest declares {} samples, records hold {sample_count}",
                manifest.sample_count
            ))
            .into());
        }
        Ok(Dataset { manifest, records })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated { offset: self.pos, needed: n, available });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let bytes = dataset.to_bytes()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?)
}

/// Seeded random split into `(train, eval)` with
/// `round(eval_fraction · N)` evaluation records.
pub fn split(dataset: &Dataset, eval_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::invalid(format!("eval fraction {eval_fraction} outside (0, 1)")));
    }
    let n = dataset.len();
    let n_eval = (eval_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_eval = vec![false; n];
    for &i in &order[..n_eval] {
        is_eval[i] = true;
    }
    let (mut train, mut eval) = (Vec::with_capacity(n - n_eval), Vec::with_capacity(n_eval));
    for (r, flag) in dataset.records.iter().zip(is_eval) {
        if flag {
            eval.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((dataset.with_records(train)?, dataset.with_records(eval)?))
}

/// Records sharing one step count.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub records: Vec<&'a TrajectoryRecord>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn step_count(&self) -> usize {
        self.records.first().map_or(0, |r| r.step_count())
    }
}

/// One epoch of batches: records are bucketed by step count, shuffled within
/// each bucket, cut into batches of at most `batch_size`, and the batch order
/// is shuffled. Every record appears exactly once.
pub fn batches(dataset: &Dataset, batch_size: usize, shuffle_seed: u64) -> Result<impl Iterator<Item = Batch<'_>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut buckets: BTreeMap<usize, Vec<&TrajectoryRecord>> = BTreeMap::new();
    for r in &dataset.records {
        buckets.entry(r.step_count()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (_, mut bucket) in buckets {
        bucket.shuffle(&mut rng);
        for chunk in bucket.chunks(batch_size) {
            out.push(Batch { records: chunk.to_vec() });
        }
    }
    out.shuffle(&mut rng);
    Ok(out.into_iter())
}

/// Z-scores the samples with the dataset's own statistics.
pub fn normalize(dataset: &Dataset) -> Result<Dataset> {
    let stats = NormStats::from_samples(dataset.records.iter().flat_map(|r| &r.voltages))?;
    apply_normalization(dataset, stats)
}

/// Z-scores the samples with externally supplied (training-set) statistics.
pub fn apply_normalization(dataset: &Dataset, stats: NormStats) -> Result<Dataset> {
    stats.validate()?;
    if dataset.manifest.applied.is_some() {
        return Err(Error::invalid("dataset is already normalized"));
    }
    let records = dataset
        .records
        .iter()
        .map(|r| TrajectoryRecord {
            prep: r.prep,
            meas: r.meas,
            voltages: r.voltages.iter().map(|&v| stats.apply(v) as f32).collect(),
        })
        .collect();
    let mut out = dataset.with_records(records)?;
    out.manifest.applied = Some(stats);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::generate_dataset;
    use proptest::prelude::*;

    fn record(prep: Label, meas: Label, voltages: Vec<f32>) -> TrajectoryRecord {
        TrajectoryRecord { prep, meas, voltages }
    }

    fn sample_dataset() -> Dataset {
        let cfg = SimConfig { seed: 9, ..SimConfig::default() };
        let shots = generate_dataset(&cfg, 1).unwrap();
        Dataset::from_shots(&cfg, &shots).unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let ds = sample_dataset();
        let bytes = ds.to_bytes().unwrap();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = Dataset::new(None, vec![]).unwrap();
        let back = Dataset::from_bytes(&ds.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ds);
        assert!(back.manifest.normalization.is_none());
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("qtraj-data-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("d.qtrj");
        let ds = sample_dataset();
        write_dataset(&path, &ds).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ds);
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn corrupted_length_field_is_truncation() {
        let ds = Dataset::new(
            None,
            vec![record(Label::new(Axis::Z, true), Label::new(Axis::X, false), vec![1.0, 2.0, 3.0])],
        )
        .unwrap();
        let mut bytes = ds.to_bytes().unwrap();
        let manifest_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let steps_at = HEADER_LEN + manifest_len + 4;
        bytes[steps_at] = 200;
        match Dataset::from_bytes(&bytes) {
            Err(Error::Format(FormatError::Truncated { .. })) => {}
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn corruption_classes_are_rejected() {
        let ds = sample_dataset();
        let bytes = ds.to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format(FormatError::BadMagic(_)))));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format(FormatError::UnsupportedVersion(9)))));

        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 10] ^= 0x40;
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format(FormatError::Checksum { .. }))));

        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));

        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format(FormatError::TrailingBytes(1)))));
    }

    #[test]
    fn invalid_label_bytes_are_rejected() {
        let ds =
            Dataset::new(None, vec![record(Label::new(Axis::Y, true), Label::new(Axis::X, false), vec![0.5])]).unwrap();
        let mut bytes = ds.to_bytes().unwrap();
        let manifest_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        bytes[HEADER_LEN + manifest_len] = 3;
        assert!(matches!(Dataset::from_bytes(&bytes), Err(Error::Format(FormatError::Record { .. }))));
    }

    #[test]
    fn split_counts_and_determinism() {
        let ds = sample_dataset();
        let (train, eval) = split(&ds, 0.25, 3).unwrap();
        assert_eq!(eval.len(), 90);
        assert_eq!(train.len(), 270);
        let (train2, eval2) = split(&ds, 0.25, 3).unwrap();
        assert_eq!(train, train2);
        assert_eq!(eval, eval2);
        assert!(split(&ds, 0.0, 1).is_err());
        assert!(split(&ds, 1.0, 1).is_err());
    }

    #[test]
    fn paper_scale_split_sizes() {
        // 2×10⁶ records at fraction 0.25 gives 1.5×10⁶ / 5×10⁵; checked on the
        // index arithmetic that `split` uses.
        let n = 2_000_000usize;
        let n_eval = (0.25 * n as f64).round() as usize;
        assert_eq!((n - n_eval, n_eval), (1_500_000, 500_000));
    }

    #[test]
    fn batches_are_uniform_and_exhaustive() {
        let one = Label::new(Axis::Z, true);
        let mut records: Vec<_> = (0..2048).map(|i| record(one, one, vec![i as f32; 7])).collect();
        let ds = Dataset::new(None, records.clone()).unwrap();
        let b: Vec<_> = batches(&ds, 1024, 0).unwrap().collect();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|b| b.len() == 1024));

        records.extend((0..10).map(|i| record(one, one, vec![i as f32; 3])));
        let ds = Dataset::new(None, records).unwrap();
        let e1: Vec<_> = batches(&ds, 100, 1).unwrap().collect();
        let e2: Vec<_> = batches(&ds, 100, 2).unwrap().collect();
        for b in &e1 {
            assert!(b.records.iter().all(|r| r.step_count() == b.step_count()));
        }
        let order = |e: &[Batch]| -> Vec<f32> {
            e.iter().flat_map(|b| b.records.iter().map(|r| r.voltages[0] + 1e4 * r.voltages.len() as f32)).collect()
        };
        let (o1, o2) = (order(&e1), order(&e2));
        assert_ne!(o1, o2);
        let (mut s1, mut s2) = (o1.clone(), o2.clone());
        s1.sort_by(f32::total_cmp);
        s2.sort_by(f32::total_cmp);
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), 2058);
        assert!(batches(&ds, 0, 0).is_err());
    }

    #[test]
    fn normalization_statistics() {
        let ds = sample_dataset();
        let norm = normalize(&ds).unwrap();
        let stats = norm.manifest.normalization.unwrap();
        assert!(stats.mean.abs() < 1e-6);
        assert!((stats.std - 1.0).abs() < 1e-6);
        let applied = norm.manifest.applied.unwrap();
        let again = apply_normalization(&ds, applied).unwrap();
        assert_eq!(again, norm);
        assert!(normalize(&norm).is_err());

        let flat = Dataset::new(None, vec![record(Label::new(Axis::X, true), Label::new(Axis::X, true), vec![1.0; 5])])
            .unwrap();
        assert!(normalize(&flat).is_err());
    }

    #[test]
    fn unmonitored_records_have_zero_mean() {
        let cfg = SimConfig { meas_dephasing: 0.0, seed: 4, ..SimConfig::default() };
        let ds = Dataset::from_shots(&cfg, &generate_dataset(&cfg, 2).unwrap()).unwrap();
        let stats = ds.norm_stats().unwrap();
        let n = ds.manifest.sample_count as f64;
        assert!(stats.mean.abs() < 4.0 * stats.std / n.sqrt());
        assert!((stats.std - (1.0 / cfg.record_dt).sqrt()).abs() / stats.std < 0.02);
    }

    fn arb_record() -> impl Strategy<Value = TrajectoryRecord> {
        (0usize..6, 0usize..6, prop::collection::vec(-1e6f32..1e6, 0..40))
            .prop_map(|(p, m, v)| record(Label::all()[p], Label::all()[m], v))
    }

    proptest! {
        #[test]
        fn arbitrary_datasets_round_trip(records in prop::collection::vec(arb_record(), 0..20)) {
            let ds = Dataset::new(None, records).unwrap();
            let bytes = ds.to_bytes().unwrap();
            prop_assert_eq!(Dataset::from_bytes(&bytes).unwrap(), ds);
        }

        #[test]
        fn truncations_never_decode(cut in 0usize..400) {
            let ds = Dataset::new(None, vec![
                record(Label::all()[1], Label::all()[4], vec![0.25; 30]),
                record(Label::all()[2], Label::all()[0], vec![-3.0; 12]),
            ]).unwrap();
            let bytes = ds.to_bytes().unwrap();
            let cut = cut.min(bytes.len() - 1);
            prop_assert!(Dataset::from_bytes(&bytes[..cut]).is_err());
        }
    }
}
