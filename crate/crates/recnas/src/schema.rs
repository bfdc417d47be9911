//! Multi-field categorical data model: field schemas, instances, and
//! the newline-delimited JSON dataset format.

use crate::RecError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Valence {
    Univalent,
    Multivalent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldGroup {
    NonSequential,
    BehaviorElement,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSchema {
    pub name: String,
    pub cardinality: usize,
    pub valence: Valence,
    pub group: FieldGroup,
}

/// Dataset-wide schema: the ordered field list plus the maximum behavior
/// sequence length T. Behavior-element fields form a fixed ordered set
/// shared by all sequence positions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    pub fields: Vec<FieldSchema>,
    pub max_seq_len: usize,
}

impl DatasetSchema {
    pub fn validate(&self) -> Result<(), RecError> {
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.fields {
            if f.cardinality == 0 {
                return Err(RecError::Schema(format!(
                    "field {}: cardinality must be >= 1",
                    f.name
                )));
            }
            if !seen.insert(f.name.clone()) {
                return Err(RecError::Schema(format!("duplicate field name {}", f.name)));
            }
        }
        Ok(())
    }

    pub fn non_seq_fields(&self) -> Vec<&FieldSchema> {
        self.fields
            .iter()
            .filter(|f| f.group == FieldGroup::NonSequential)
            .collect()
    }

    pub fn behavior_fields(&self) -> Vec<&FieldSchema> {
        self.fields
            .iter()
            .filter(|f| f.group == FieldGroup::BehaviorElement)
            .collect()
    }

    /// N: number of non-sequential fields.
    pub fn num_non_seq(&self) -> usize {
        self.non_seq_fields().len()
    }

    /// N_b: number of fields per behavior element.
    pub fn num_behavior(&self) -> usize {
        self.behavior_fields().len()
    }

    pub fn has_behavior(&self) -> bool {
        self.num_behavior() > 0
    }

    /// The designated item field for retrieval tasks: the first
    /// behavior-element field.
    pub fn item_field(&self) -> Option<&FieldSchema> {
        self.behavior_fields().first().copied()
    }

    pub fn load(path: &Path) -> Result<Self, RecError> {
        let text = std::fs::read_to_string(path)?;
        let schema: DatasetSchema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> Result<(), RecError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Value sets for one behavior element, ordered like the schema's
/// behavior fields.
pub type BehaviorElement = Vec<Vec<u32>>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    Click(u8),
    NextItem(u32),
}

impl Label {
    pub fn as_raw(&self) -> u32 {
        match self {
            Label::Click(y) => *y as u32,
            Label::NextItem(i) => *i,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    /// Per non-sequential field (schema order): the id set.
    pub non_seq: Vec<Vec<u32>>,
    /// Behavior elements, oldest first, already truncated to T.
    pub behavior: Vec<BehaviorElement>,
    pub target_item: Option<BehaviorElement>,
    pub label: Label,
}

impl Instance {
    pub fn validate(&self, schema: &DatasetSchema) -> Result<(), RecError> {
        let non_seq = schema.non_seq_fields();
        if self.non_seq.len() != non_seq.len() {
            return Err(RecError::Schema(format!(
                "instance has {} non-sequential fields, schema {}",
                self.non_seq.len(),
                non_seq.len()
            )));
        }
        for (ids, f) in self.non_seq.iter().zip(&non_seq) {
            check_ids(ids, f)?;
            if f.valence == Valence::Univalent && ids.len() != 1 {
                return Err(RecError::Schema(format!(
                    "univalent field {} has {} ids",
                    f.name,
                    ids.len()
                )));
            }
        }
        if self.behavior.len() > schema.max_seq_len {
            return Err(RecError::Schema(format!(
                "behavior length {} exceeds T={}",
                self.behavior.len(),
                schema.max_seq_len
            )));
        }
        let beh = schema.behavior_fields();
        for elem in self.behavior.iter().chain(self.target_item.iter()) {
            if elem.len() != beh.len() {
                return Err(RecError::Schema(format!(
                    "behavior element has {} fields, schema {}",
                    elem.len(),
                    beh.len()
                )));
            }
            for (ids, f) in elem.iter().zip(&beh) {
                check_ids(ids, f)?;
            }
        }
        Ok(())
    }
}

fn check_ids(ids: &[u32], f: &FieldSchema) -> Result<(), RecError> {
    for &id in ids {
        if id as usize >= f.cardinality {
            return Err(RecError::Schema(format!(
                "field {}: id {id} out of cardinality {}",
                f.name, f.cardinality
            )));
        }
    }
    Ok(())
}

/// On-disk record: field-name keyed maps, one JSON object per line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    #[serde(default)]
    non_seq: BTreeMap<String, Vec<u32>>,
    #[serde(default)]
    behavior: Vec<BTreeMap<String, Vec<u32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<BTreeMap<String, Vec<u32>>>,
    label: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Ctr,
    NextItem,
}

fn element_from_map(
    map: &BTreeMap<String, Vec<u32>>,
    fields: &[&FieldSchema],
) -> Result<Vec<Vec<u32>>, RecError> {
    fields
        .iter()
        .map(|f| {
            map.get(&f.name)
                .cloned()
                .ok_or_else(|| RecError::Schema(format!("missing field {}", f.name)))
        })
        .collect()
}

pub fn instance_from_json(
    line: &str,
    schema: &DatasetSchema,
    task: Task,
) -> Result<Instance, RecError> {
    let raw: RawRecord = serde_json::from_str(line)?;
    let non_seq = element_from_map(&raw.non_seq, &schema.non_seq_fields())?;
    let beh_fields = schema.behavior_fields();
    let mut behavior: Vec<BehaviorElement> = raw
        .behavior
        .iter()
        .map(|m| element_from_map(m, &beh_fields))
        .collect::<Result<_, _>>()?;
    // over-long sequences keep the most recent T elements
    if behavior.len() > schema.max_seq_len {
        behavior.drain(..behavior.len() - schema.max_seq_len);
    }
    let target_item = raw
        .target
        .as_ref()
        .map(|m| element_from_map(m, &beh_fields))
        .transpose()?;
    let label = match task {
        Task::Ctr => {
            if raw.label > 1 {
                return Err(RecError::Schema(format!(
                    "ctr label must be 0/1, got {}",
                    raw.label
                )));
            }
            Label::Click(raw.label as u8)
        }
        Task::NextItem => Label::NextItem(raw.label),
    };
    let inst = Instance { non_seq, behavior, target_item, label };
    inst.validate(schema)?;
    Ok(inst)
}

pub fn instance_to_json(inst: &Instance, schema: &DatasetSchema) -> String {
    let beh_fields = schema.behavior_fields();
    let to_map = |elem: &BehaviorElement| -> BTreeMap<String, Vec<u32>> {
        beh_fields
            .iter()
            .zip(elem)
            .map(|(f, ids)| (f.name.clone(), ids.clone()))
            .collect()
    };
    let raw = RawRecord {
        non_seq: schema
            .non_seq_fields()
            .iter()
            .zip(&inst.non_seq)
            .map(|(f, ids)| (f.name.clone(), ids.clone()))
            .collect(),
        behavior: inst.behavior.iter().map(&to_map).collect(),
        target: inst.target_item.as_ref().map(&to_map),
        label: inst.label.as_raw(),
    };
    serde_json::to_string(&raw).expect("record serialization")
}

pub fn load_dataset(path: &Path, schema: &DatasetSchema, task: Task) -> Result<Vec<Instance>, RecError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(instance_from_json(&line, schema, task)?);
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, schema: &DatasetSchema, instances: &[Instance]) -> Result<(), RecError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        writeln!(f, "{}", instance_to_json(inst, schema))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_schema() -> DatasetSchema {
        DatasetSchema {
            fields: vec![
                FieldSchema {
                    name: "user".into(),
                    cardinality: 10,
                    valence: Valence::Univalent,
                    group: FieldGroup::NonSequential,
                },
                FieldSchema {
                    name: "tags".into(),
                    cardinality: 6,
                    valence: Valence::Multivalent,
                    group: FieldGroup::NonSequential,
                },
                FieldSchema {
                    name: "item".into(),
                    cardinality: 20,
                    valence: Valence::Univalent,
                    group: FieldGroup::BehaviorElement,
                },
            ],
            max_seq_len: 4,
        }
    }

    #[test]
    fn round_trip_and_truncation() {
        let schema = toy_schema();
        let line = r#"{"non_seq":{"user":[3],"tags":[1,2]},"behavior":[{"item":[0]},{"item":[1]},{"item":[2]},{"item":[3]},{"item":[4]},{"item":[5]}],"label":1}"#;
        let inst = instance_from_json(line, &schema, Task::Ctr).unwrap();
        // keeps the most recent T=4
        assert_eq!(inst.behavior.len(), 4);
        assert_eq!(inst.behavior[0][0], vec![2]);
        assert_eq!(inst.behavior[3][0], vec![5]);
        let back = instance_to_json(&inst, &schema);
        let again = instance_from_json(&back, &schema, Task::Ctr).unwrap();
        assert_eq!(again.non_seq, inst.non_seq);
        assert_eq!(again.behavior, inst.behavior);
    }

    #[test]
    fn id_out_of_range_rejected() {
        let schema = toy_schema();
        let line = r#"{"non_seq":{"user":[99],"tags":[]},"behavior":[],"label":0}"#;
        assert!(instance_from_json(line, &schema, Task::Ctr).is_err());
    }

    #[test]
    fn ctr_label_must_be_binary() {
        let schema = toy_schema();
        let line = r#"{"non_seq":{"user":[1],"tags":[]},"behavior":[],"label":7}"#;
        assert!(instance_from_json(line, &schema, Task::Ctr).is_err());
        assert!(instance_from_json(line, &schema, Task::NextItem).is_ok());
    }
}
