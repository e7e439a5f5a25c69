//! Field layout of the one-hot feature space.
//!
//! Each field owns a contiguous block `[start, end]` of global feature
//! indices. The last slot of every block is reserved for values that were not
//! seen when the schema was built (out-of-vocabulary).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Field {
    name: String,
    values: Vec<String>,
    lookup: HashMap<String, usize>,
    start: usize,
}

impl Field {
    fn cardinality(&self) -> usize {
        self.values.len() + 1
    }

    fn end(&self) -> usize {
        self.start + self.values.len()
    }
}

/// Immutable description of the categorical fields and their global index ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaRepr", into = "SchemaRepr")]
pub struct FieldSchema {
    fields: Vec<Field>,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct FieldRepr {
    name: String,
    values: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SchemaRepr {
    fields: Vec<FieldRepr>,
}

impl TryFrom<SchemaRepr> for FieldSchema {
    type Error = Error;

    fn try_from(repr: SchemaRepr) -> Result<Self> {
        let declared: usize = repr.fields.iter().map(|f| f.values.len() + 1).sum();
        let schema = FieldSchema::build(repr.fields.into_iter().map(|f| (f.name, f.values)))?;
        // A stored vocabulary with duplicates would silently shift every later index.
        if schema.dim != declared {
            return Err(Error::ModelFormat(
                "schema vocabulary contains duplicate values".into(),
            ));
        }
        Ok(schema)
    }
}

impl From<FieldSchema> for SchemaRepr {
    fn from(schema: FieldSchema) -> Self {
        SchemaRepr {
            fields: schema
                .fields
                .into_iter()
                .map(|f| FieldRepr {
                    name: f.name,
                    values: f.values,
                })
                .collect(),
        }
    }
}

impl FieldSchema {
    /// Builds a schema from `(field name, observed values)` pairs.
    ///
    /// Values keep their first-seen order and duplicates are dropped. Every
    /// field gets `|values| + 1` slots; the extra one is the OOV slot.
    pub fn build<N, I, V>(field_specs: impl IntoIterator<Item = (N, I)>) -> Result<Self>
    where
        N: Into<String>,
        I: IntoIterator<Item = V>,
        V: Into<String>,
    {
        let mut fields: Vec<Field> = Vec::new();
        let mut start = 0;
        for (name, values) in field_specs {
            let name = name.into();
            if fields.iter().any(|f| f.name == name) {
                return Err(Error::DuplicateField(name));
            }
            let mut ordered = Vec::new();
            let mut lookup = HashMap::new();
            for value in values {
                let value = value.into();
                if !lookup.contains_key(&value) {
                    lookup.insert(value.clone(), ordered.len());
                    ordered.push(value);
                }
            }
            let field = Field {
                name,
                values: ordered,
                lookup,
                start,
            };
            start += field.cardinality();
            fields.push(field);
        }
        if fields.is_empty() {
            return Err(Error::EmptySchema);
        }
        Ok(FieldSchema { fields, dim: start })
    }

    /// Total one-hot dimension `N`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn field_name(&self, field: usize) -> &str {
        &self.fields[field].name
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|f| f.name.as_str())
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn cardinality(&self, field: usize) -> usize {
        self.fields[field].cardinality()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.fields.iter().map(Field::cardinality).collect()
    }

    /// Inclusive global index range `(start, end)` of a field.
    pub fn range(&self, field: usize) -> (usize, usize) {
        let f = &self.fields[field];
        (f.start, f.end())
    }

    pub fn start(&self, field: usize) -> usize {
        self.fields[field].start
    }

    /// Global index of the field's out-of-vocabulary slot.
    pub fn oov_index(&self, field: usize) -> usize {
        self.fields[field].end()
    }

    /// Known value at a global index, `None` for OOV slots.
    pub fn value_at(&self, global_index: usize) -> Result<Option<&str>> {
        let field = self.field_of(global_index)?;
        let f = &self.fields[field];
        Ok(f.values.get(global_index - f.start).map(String::as_str))
    }

    /// Global index for a raw value of a field; unknown values map to OOV.
    pub fn index_of(&self, field: usize, value: Option<&str>) -> usize {
        let f = &self.fields[field];
        match value.and_then(|v| f.lookup.get(v)) {
            Some(&local) => f.start + local,
            None => f.end(),
        }
    }

    /// Field ordinal whose range contains `global_index`.
    pub fn field_of(&self, global_index: usize) -> Result<usize> {
        if global_index >= self.dim {
            return Err(Error::IndexOutOfRange {
                index: global_index,
                dim: self.dim,
            });
        }
        Ok(self.fields.partition_point(|f| f.start <= global_index) - 1)
    }

    /// Encodes a raw record. Missing fields and unseen values land in the OOV slot.
    pub fn encode_record<S: AsRef<str>>(
        &self,
        raw: &HashMap<String, S>,
        label: u8,
    ) -> Result<SparseInstance> {
        if label > 1 {
            return Err(Error::InvalidLabel(label.to_string()));
        }
        let active = (0..self.n_fields())
            .map(|i| self.index_of(i, raw.get(&self.fields[i].name).map(AsRef::as_ref)))
            .collect();
        Ok(SparseInstance { active, label })
    }

    /// Checks that an instance has exactly one index inside each field's range.
    pub fn validate(&self, instance: &SparseInstance) -> Result<()> {
        if instance.active.len() != self.n_fields() {
            return Err(Error::DimensionMismatch(format!(
                "instance has {} active indices, schema has {} fields",
                instance.active.len(),
                self.n_fields()
            )));
        }
        for (i, &idx) in instance.active.iter().enumerate() {
            let (start, end) = self.range(i);
            if idx < start || idx > end {
                return Err(Error::IndexOutOfRange {
                    index: idx,
                    dim: self.dim,
                });
            }
        }
        if instance.label > 1 {
            return Err(Error::InvalidLabel(instance.label.to_string()));
        }
        Ok(())
    }
}

/// One record: the active global feature index of every field plus its click label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SparseInstance {
    pub active: Vec<usize>,
    pub label: u8,
}

impl SparseInstance {
    pub fn new(active: Vec<usize>, label: u8) -> Self {
        SparseInstance { active, label }
    }

    /// Label as a float target.
    pub fn y(&self) -> f64 {
        f64::from(self.label)
    }

    pub(crate) fn check_bounds(&self, dim: usize) -> Result<()> {
        match self.active.iter().find(|&&i| i >= dim) {
            Some(&index) => Err(Error::IndexOutOfRange { index, dim }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_field() -> FieldSchema {
        FieldSchema::build([("a", vec!["a", "b"]), ("b", vec!["x", "y", "z"])]).unwrap()
    }

    #[test]
    fn layout_counts_oov_slots() {
        let s = two_field();
        assert_eq!(s.dim(), 7);
        assert_eq!(s.range(0), (0, 2));
        assert_eq!(s.range(1), (3, 6));

        let single = FieldSchema::build([("only", vec!["v"])]).unwrap();
        assert_eq!(single.dim(), 2);
        assert_eq!(single.range(0), (0, 1));
    }

    #[test]
    fn rejects_empty_and_duplicate() {
        let empty: Vec<(String, Vec<String>)> = vec![];
        assert!(matches!(FieldSchema::build(empty), Err(Error::EmptySchema)));
        assert!(matches!(
            FieldSchema::build([("a", vec!["1"]), ("a", vec!["2"])]),
            Err(Error::DuplicateField(_))
        ));
    }

    #[test]
    fn encode_known_unknown_and_missing() {
        let s = FieldSchema::build([
            ("city", vec!["London", "Paris"]),
            ("device", vec!["PC", "Mobile"]),
            ("slot", vec!["s1"]),
        ])
        .unwrap();
        let raw: HashMap<String, &str> =
            [("city".to_string(), "London"), ("device".to_string(), "Tablet")].into();
        let inst = s.encode_record(&raw, 1).unwrap();
        assert_eq!(inst.active[0], s.start(0));
        assert_eq!(inst.active[1], s.oov_index(1));
        assert_eq!(inst.active[2], s.oov_index(2));
        assert_eq!(inst.active.len(), 3);
        assert!(inst.active.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(s.encode_record(&raw, 2), Err(Error::InvalidLabel(_))));
    }

    #[test]
    fn field_of_edges() {
        let s = two_field();
        assert_eq!(s.field_of(0).unwrap(), 0);
        assert_eq!(s.field_of(s.dim() - 1).unwrap(), 1);
        assert!(matches!(s.field_of(7), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn serde_round_trip() {
        let s = two_field();
        let json = serde_json::to_string(&s).unwrap();
        let back: FieldSchema = serde_json::from_str(&json).unwrap();
        assert_eq!(s, back);
    }

    proptest! {
        #[test]
        fn layout_invariants(cards in proptest::collection::vec(0usize..8, 1..6)) {
            let specs: Vec<(String, Vec<String>)> = cards
                .iter()
                .enumerate()
                .map(|(i, &c)| (format!("f{i}"), (0..c).map(|v| v.to_string()).collect()))
                .collect();
            let s = FieldSchema::build(specs).unwrap();
            prop_assert_eq!(s.cardinalities().iter().sum::<usize>(), s.dim());
            prop_assert_eq!(s.range(0).0, 0);
            prop_assert_eq!(s.range(s.n_fields() - 1).1, s.dim() - 1);
            for i in 0..s.n_fields() {
                let (start, end) = s.range(i);
                prop_assert_eq!(end - start + 1, s.cardinality(i));
                prop_assert!(s.cardinality(i) >= 1);
                if i + 1 < s.n_fields() {
                    prop_assert_eq!(s.range(i + 1).0, end + 1);
                }
            }
            // field_of against a linear scan over all ranges
            for g in 0..s.dim() {
                let scan = (0..s.n_fields())
                    .find(|&i| s.range(i).0 <= g && g <= s.range(i).1)
                    .unwrap();
                prop_assert_eq!(s.field_of(g).unwrap(), scan);
            }
        }

        #[test]
        fn encoded_instances_round_trip(
            cards in proptest::collection::vec(1usize..6, 1..5),
            picks in proptest::collection::vec(0usize..10, 5),
        ) {
            let specs: Vec<(String, Vec<String>)> = cards
                .iter()
                .enumerate()
                .map(|(i, &c)| (format!("f{i}"), (0..c).map(|v| format!("v{v}")).collect()))
                .collect();
            let s = FieldSchema::build(specs).unwrap();
            let raw: HashMap<String, String> = (0..s.n_fields())
                .map(|i| (format!("f{i}"), format!("v{}", picks[i])))
                .collect();
            let inst = s.encode_record(&raw, 0).unwrap();
            s.validate(&inst).unwrap();
            for (i, &g) in inst.active.iter().enumerate() {
                prop_assert_eq!(s.field_of(g).unwrap(), i);
            }
        }
    }
}
