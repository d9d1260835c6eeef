//! JSON-lines dataset records. See `docs/dataset.schema.json`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ContactTrack, HoiSequence, HumanPose, ObjectPose, PredictedContacts};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Rotation6D, Vec3};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceRecord {
    past_len: usize,
    future_len: usize,
    frame_rate: f64,
    human: HumanRecord,
    object: ObjectRecord,
    rest_cloud: Vec<[f64; 3]>,
    rest_contact_indices: Vec<usize>,
    contact: ContactRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prediction: Option<PredictionRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HumanRecord {
    /// frames × (J·3)
    positions: Vec<Vec<f64>>,
    /// frames × (J·6)
    rotations6d: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectRecord {
    centroid: Vec<[f64; 3]>,
    rotation6d: Vec<[f64; 6]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContactRecord {
    group_sizes: Vec<usize>,
    subset_indices: Vec<Vec<usize>>,
    /// frames × N, entries 0 or 1
    mask: Vec<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionRecord {
    /// future frames × (N·k·3)
    contacts_human: Vec<Vec<f64>>,
    contacts_object: Vec<Vec<f64>>,
}

fn flatten_points(pts: &[Vec3]) -> Vec<f64> {
    pts.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn unflatten_points(v: &[f64], field: &str, line: usize) -> Result<Vec<Vec3>> {
    if !v.len().is_multiple_of(3) {
        return Err(Error::Parse { line, field: field.into(), message: format!("length {} not divisible by 3", v.len()) });
    }
    Ok(v.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
}

impl From<&HoiSequence> for SequenceRecord {
    fn from(s: &HoiSequence) -> Self {
        SequenceRecord {
            past_len: s.past_len,
            future_len: s.future_len,
            frame_rate: s.frame_rate,
            human: HumanRecord {
                positions: s.human.iter().map(|h| flatten_points(&h.joint_positions)).collect(),
                rotations6d: s
                    .human
                    .iter()
                    .map(|h| h.joint_rotations.iter().flat_map(Rotation6D::to_array).collect())
                    .collect(),
            },
            object: ObjectRecord {
                centroid: s.object.iter().map(|o| [o.centroid.x, o.centroid.y, o.centroid.z]).collect(),
                rotation6d: s.object.iter().map(|o| o.rotation.to_array()).collect(),
            },
            rest_cloud: s.rest_cloud.points().iter().map(|p| [p.x, p.y, p.z]).collect(),
            rest_contact_indices: s.rest_contact_indices.clone(),
            contact: ContactRecord {
                group_sizes: s.contact.group_sizes.clone(),
                subset_indices: s.contact.subset_indices.clone(),
                mask: s.contact.mask.iter().map(|row| row.iter().map(|&b| u8::from(b)).collect()).collect(),
            },
            prediction: s.prediction.as_ref().map(|p| PredictionRecord {
                contacts_human: p.contacts_human.iter().map(|r| flatten_points(r)).collect(),
                contacts_object: p.contacts_object.iter().map(|r| flatten_points(r)).collect(),
            }),
        }
    }
}

fn from_record(r: SequenceRecord, line: usize) -> Result<HoiSequence> {
    let perr = |field: &str, message: String| Error::Parse { line, field: field.into(), message };
    if r.human.positions.len() != r.human.rotations6d.len() {
        return Err(perr("human.rotations6d", "frame count differs from human.positions".into()));
    }
    let mut human = Vec::with_capacity(r.human.positions.len());
    for (f, (p, q)) in r.human.positions.iter().zip(&r.human.rotations6d).enumerate() {
        let joint_positions = unflatten_points(p, "human.positions", line)?;
        if q.len() != joint_positions.len() * 6 {
            return Err(perr("human.rotations6d", format!("frame {f}: expected {} values", joint_positions.len() * 6)));
        }
        let joint_rotations = q.chunks(6).map(Rotation6D::from_slice).collect();
        human.push(HumanPose { joint_positions, joint_rotations });
    }
    if r.object.centroid.len() != r.object.rotation6d.len() {
        return Err(perr("object.rotation6d", "frame count differs from object.centroid".into()));
    }
    let object = r
        .object
        .centroid
        .iter()
        .zip(&r.object.rotation6d)
        .map(|(c, q)| ObjectPose { centroid: Vec3::from(*c), rotation: Rotation6D::from_slice(q) })
        .collect();
    let rest_cloud = PointCloud::new(r.rest_cloud.iter().map(|p| Vec3::from(*p)).collect())
        .map_err(|e| perr("rest_cloud", e.to_string()))?;
    let mut mask = Vec::with_capacity(r.contact.mask.len());
    for (f, row) in r.contact.mask.iter().enumerate() {
        if let Some(v) = row.iter().find(|&&v| v > 1) {
            return Err(perr("contact.mask", format!("frame {f}: mask entries must be 0 or 1, got {v}")));
        }
        mask.push(row.iter().map(|&v| v == 1).collect());
    }
    let prediction = match r.prediction {
        None => None,
        Some(p) => Some(PredictedContacts {
            contacts_human: p
                .contacts_human
                .iter()
                .map(|v| unflatten_points(v, "prediction.contacts_human", line))
                .collect::<Result<_>>()?,
            contacts_object: p
                .contacts_object
                .iter()
                .map(|v| unflatten_points(v, "prediction.contacts_object", line))
                .collect::<Result<_>>()?,
        }),
    };
    let seq = HoiSequence {
        past_len: r.past_len,
        future_len: r.future_len,
        frame_rate: r.frame_rate,
        human,
        object,
        rest_cloud,
        rest_contact_indices: r.rest_contact_indices,
        contact: ContactTrack { group_sizes: r.contact.group_sizes, subset_indices: r.contact.subset_indices, mask },
        prediction,
    };
    seq.validate().map_err(|e| match e {
        Error::Parse { field, message, .. } => Error::Parse { line, field, message },
        other => other,
    })?;
    Ok(seq)
}

/// Serializes to a single-line JSON record. Values must be finite.
pub fn serialize_sequence(s: &HoiSequence) -> String {
    serde_json::to_string(&SequenceRecord::from(s)).expect("sequence records always serialize")
}

pub(crate) fn parse_line(record: &str, line: usize) -> Result<HoiSequence> {
    let r: SequenceRecord = serde_json::from_str(record).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.contains("missing field") || msg.contains("unknown field"))
            .unwrap_or("<record>")
            .to_string();
        Error::Parse { line, field, message: msg }
    })?;
    from_record(r, line)
}

pub fn deserialize_sequence(record: &str) -> Result<HoiSequence> {
    parse_line(record, 1)
}

pub fn write_dataset(path: &Path, seqs: &[HoiSequence]) -> Result<()> {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&serialize_sequence(s));
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a JSON-lines dataset; blank lines are skipped and errors carry the
/// 1-based line number.
pub fn read_dataset(path: &Path) -> Result<Vec<HoiSequence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use proptest::prelude::*;

    const MINIMAL: &str = r#"{"past_len":1,"future_len":1,"frame_rate":30.0,
        "human":{"positions":[[0,0,0, 0,0.5,0],[0,0,0, 0,0.5,0.1]],
                 "rotations6d":[[1,0,0,0,1,0, 1,0,0,0,1,0],[1,0,0,0,1,0, 0,1,0,-1,0,0]]},
        "object":{"centroid":[[0.1,0.2,0.3],[0.1,0.25,0.3]],"rotation6d":[[1,0,0,0,1,0],[1,0,0,0,1,0]]},
        "rest_cloud":[[0.0,0.0,0.0],[0.05,0.0,0.0]],
        "rest_contact_indices":[1],
        "contact":{"group_sizes":[0,1],"subset_indices":[[],[1,1]],"mask":[[0,1],[0,0]]}}"#;

    #[test]
    fn minimal_fixture_parses() {
        let s = deserialize_sequence(&MINIMAL.replace('\n', " ")).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.num_joints(), 2);
        assert_eq!(s.human[0].joint_positions[1], Vec3::new(0.0, 0.5, 0.0));
        assert_eq!(s.human[1].joint_rotations[1], Rotation6D::new(Vec3::new(0.0, 1.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)));
        assert_eq!(s.object[1].centroid, Vec3::new(0.1, 0.25, 0.3));
        assert_eq!(s.groups(), vec![vec![], vec![1]]);
        assert_eq!(s.subset_size(), Some(2));
        assert_eq!(s.contact.mask, vec![vec![false, true], vec![false, false]]);
        let c = s.contact_positions(0, 2).unwrap();
        assert!((c[2] - Vec3::new(0.15, 0.2, 0.3)).norm() < 1e-12);
        assert_eq!(c[0], Vec3::zeros());
        assert!(s.prediction.is_none());
    }

    #[test]
    fn missing_field_is_named() {
        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        v.as_object_mut().unwrap().remove("rest_cloud");
        match deserialize_sequence(&v.to_string()) {
            Err(Error::Parse { field, line, .. }) => {
                assert_eq!(field, "rest_cloud");
                assert_eq!(line, 1);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn semantic_errors_are_reported() {
        let bad_mask = MINIMAL.replace(r#""mask":[[0,1],[0,0]]"#, r#""mask":[[1,1],[0,0]]"#);
        assert!(matches!(deserialize_sequence(&bad_mask), Err(Error::Parse { field, .. }) if field == "contact.mask"));
        let bad_idx = MINIMAL.replace(r#""rest_contact_indices":[1]"#, r#""rest_contact_indices":[7]"#);
        assert!(matches!(deserialize_sequence(&bad_idx), Err(Error::Parse { .. })));
        assert!(matches!(deserialize_sequence("{not json"), Err(Error::Parse { .. })));
    }

    #[test]
    fn read_dataset_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let good = MINIMAL.replace('\n', " ");
        fs::write(&path, format!("{good}\n\n{{\"past_len\":1}}\n")).unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn prediction_round_trips() {
        let mut s = generate_synthetic(&SynthConfig::default(), 2).unwrap();
        let width = s.num_groups() * 4;
        let row: Vec<Vec3> = (0..width).map(|i| Vec3::new(i as f64 * 0.1, 1.0 / 3.0, -2.5)).collect();
        s.prediction = Some(PredictedContacts {
            contacts_human: vec![row.clone(); s.future_len],
            contacts_object: vec![row; s.future_len],
        });
        assert_eq!(deserialize_sequence(&serialize_sequence(&s)).unwrap(), s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn generated_sequences_round_trip_bitwise(seed in any::<u64>()) {
            let s = generate_synthetic(&SynthConfig::default(), seed).unwrap();
            let text = serialize_sequence(&s);
            prop_assert!(!text.contains('\n'));
            let back = deserialize_sequence(&text).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(serialize_sequence(&back), text);
        }
    }
}
