//! Dataset loading, splitting and field-wise negative-unit sampling.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::schema::{FieldSchema, SparseInstance};

/// Instances encoded against a shared schema.
#[derive(Debug, Clone)]
pub struct Dataset {
    schema: Arc<FieldSchema>,
    instances: Vec<SparseInstance>,
}

impl Dataset {
    /// Validates every instance against the schema.
    pub fn new(schema: Arc<FieldSchema>, instances: Vec<SparseInstance>) -> Result<Self> {
        for inst in &instances {
            schema.validate(inst)?;
        }
        Ok(Dataset { schema, instances })
    }

    pub fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    pub fn shared_schema(&self) -> Arc<FieldSchema> {
        Arc::clone(&self.schema)
    }

    pub fn instances(&self) -> &[SparseInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.instances.iter().map(|i| i.label).collect()
    }

    pub fn positives(&self) -> usize {
        self.instances.iter().filter(|i| i.label == 1).count()
    }

    /// Fraction of clicks; 0 for an empty dataset.
    pub fn base_rate(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.positives() as f64 / self.len() as f64
        }
    }

    pub(crate) fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: Arc::clone(&self.schema),
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
        }
    }

    pub(crate) fn ensure_same_schema(&self, other: &Dataset) -> Result<()> {
        if Arc::ptr_eq(&self.schema, &other.schema) || self.schema == other.schema {
            Ok(())
        } else {
            Err(Error::SchemaMismatch(
                "datasets were encoded with different schemas".into(),
            ))
        }
    }

    /// Writes the dataset back out as raw CSV, OOV slots as empty cells.
    pub fn write_csv<W: Write>(&self, writer: W, label_column: &str) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.schema.field_names().collect();
        header.push(label_column);
        out.write_record(&header)?;
        for inst in &self.instances {
            let mut row = Vec::with_capacity(inst.active.len() + 1);
            for &g in &inst.active {
                row.push(self.schema.value_at(g)?.unwrap_or("").to_string());
            }
            row.push(inst.label.to_string());
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::io("<csv output>", e))?;
        Ok(())
    }
}

/// Raw rows of a CSV file: header plus records.
struct RawTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table<R: Read>(reader: R) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .quoting(false)
        .from_reader(reader);
    let header = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(rec?.iter().map(|v| v.trim().to_string()).collect());
    }
    Ok(RawTable { header, rows })
}

fn parse_label(raw: &str) -> Result<u8> {
    match raw {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::InvalidLabel(other.to_string())),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

/// Loads a labelled CSV file. Without a schema one is built from the
/// observed values of every non-label column.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: &str,
    schema: Option<Arc<FieldSchema>>,
) -> Result<Dataset> {
    load_csv_reader(open(path.as_ref())?, label_column, schema)
}

pub fn load_csv_reader<R: Read>(
    reader: R,
    label_column: &str,
    schema: Option<Arc<FieldSchema>>,
) -> Result<Dataset> {
    let table = read_table(reader)?;
    let label_pos = table
        .header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::MissingColumn(label_column.to_string()))?;
    let labels = table
        .rows
        .iter()
        .map(|row| parse_label(row.get(label_pos).map(String::as_str).unwrap_or("")))
        .collect::<Result<Vec<_>>>()?;
    let schema = match schema {
        Some(s) => s,
        None => Arc::new(schema_from_table(&table, Some(label_pos))?),
    };
    let instances = encode_table(&table, &schema)?
        .into_iter()
        .zip(labels)
        .map(|(active, label)| SparseInstance { active, label })
        .collect();
    Dataset::new(schema, instances)
}

/// Loads a CSV that may lack labels, always against an existing schema.
/// Returns the dataset (labels default to 0) and whether labels were present.
pub fn load_unlabeled_csv(
    path: impl AsRef<Path>,
    label_column: Option<&str>,
    schema: Arc<FieldSchema>,
) -> Result<(Dataset, bool)> {
    let table = read_table(open(path.as_ref())?)?;
    let label_pos = label_column.and_then(|c| table.header.iter().position(|h| h == c));
    let labels = match label_pos {
        Some(p) => table
            .rows
            .iter()
            .map(|row| parse_label(row.get(p).map(String::as_str).unwrap_or("")))
            .collect::<Result<Vec<_>>>()?,
        None => vec![0; table.rows.len()],
    };
    let instances = encode_table(&table, &schema)?
        .into_iter()
        .zip(labels)
        .map(|(active, label)| SparseInstance { active, label })
        .collect();
    Ok((Dataset::new(schema, instances)?, label_pos.is_some()))
}

fn schema_from_table(table: &RawTable, label_pos: Option<usize>) -> Result<FieldSchema> {
    let specs = table
        .header
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != label_pos)
        .map(|(i, name)| {
            let values: Vec<&str> = table
                .rows
                .iter()
                .filter_map(|row| row.get(i).map(String::as_str))
                .filter(|v| !v.is_empty())
                .collect();
            (name.clone(), values)
        });
    FieldSchema::build(specs)
}

fn encode_table(table: &RawTable, schema: &FieldSchema) -> Result<Vec<Vec<usize>>> {
    let mut columns = Vec::with_capacity(schema.n_fields());
    for name in schema.field_names() {
        let pos = table.header.iter().position(|h| h == name).ok_or_else(|| {
            Error::SchemaMismatch(format!("data has no column for schema field `{name}`"))
        })?;
        columns.push(pos);
    }
    Ok(table
        .rows
        .iter()
        .map(|row| {
            columns
                .iter()
                .enumerate()
                .map(|(field, &pos)| {
                    let value = row.get(pos).map(String::as_str).filter(|v| !v.is_empty());
                    schema.index_of(field, value)
                })
                .collect()
        })
        .collect())
}

/// Shuffles once under `seed` and slices into train/validation/test parts.
/// Part sizes use largest-remainder rounding, ties going to the earlier part.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::config("split fractions must be non-negative"));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("split fractions must sum to 1"));
    }
    let sizes = largest_remainder(dataset.len(), &fractions);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, rest) = order.split_at(sizes[0]);
    let (b, c) = rest.split_at(sizes[1]);
    Ok((dataset.subset(a), dataset.subset(b), dataset.subset(c)))
}

fn largest_remainder(total: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = total.saturating_sub(sizes.iter().sum());
    let mut by_remainder: Vec<usize> = (0..fractions.len()).collect();
    by_remainder.sort_by(|&i, &j| {
        let (ri, rj) = (quotas[i] - quotas[i].floor(), quotas[j] - quotas[j].floor());
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

/// Units of one field kept for a pre-training step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldUnits {
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// The active unit of every field plus up to `m` sampled inactive units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledView {
    pub fields: Vec<FieldUnits>,
}

impl SampledView {
    /// `(global index, visible value)` for every sampled unit, positives first within each field.
    pub fn units(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(self.len());
        for f in &self.fields {
            out.push((f.positive, 1.0));
            out.extend(f.negatives.iter().map(|&g| (g, 0.0)));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.fields.iter().map(|f| 1 + f.negatives.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

/// Samples, per field and without replacement, `m` inactive units uniformly
/// from the field's range. Fields with fewer than `m` inactive units keep them all.
pub fn sample_negative_units<R: Rng + ?Sized>(
    instance: &SparseInstance,
    schema: &FieldSchema,
    m: usize,
    rng: &mut R,
) -> SampledView {
    let fields = instance
        .active
        .iter()
        .enumerate()
        .map(|(field, &positive)| {
            let (start, end) = schema.range(field);
            let active_local = positive - start;
            let inactive = end - start;
            let pick = |local: usize| start + if local < active_local { local } else { local + 1 };
            let negatives = if inactive <= m {
                (0..inactive).map(pick).collect()
            } else {
                index::sample(rng, inactive, m).into_iter().map(pick).collect()
            };
            FieldUnits { positive, negatives }
        })
        .collect();
    SampledView { fields }
}
