//! Dataset and model files, and atomic JSON/CSV writers.
//!
//! JSON output is written with object keys in sorted order, so identical
//! values always produce identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector, Vector3};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::actions::Driver;
use crate::cascade::TaskModel;
use crate::demo::{Demonstration, DemonstrationSet, FrameInstance, Pose};
use crate::error::{Error, Result};
use crate::gaussian::RiemannianGaussian;
use crate::manifold::ManifoldDescriptor;
use crate::mixture::HMMModel;
use crate::quat;
use crate::tpgmm::SkillModel;

pub const DATASET_SCHEMA: &str = "tapas-dataset/1";
pub const MODEL_SCHEMA: &str = "tapas-model/1";

/// Largest accepted deviation of a quaternion norm from one.
pub const UNIT_TOL: f64 = 1e-6;
/// Deviations above this are renormalized (with a warning).
pub const RENORMALIZE_TOL: f64 = 1e-9;

fn field<'a>(obj: &'a Map<String, Value>, ptr: &str, key: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| Error::schema(format!("{ptr}/{key}"), "missing field"))
}

fn object<'a>(v: &'a Value, ptr: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| Error::schema(ptr, "expected an object"))
}

fn array<'a>(v: &'a Value, ptr: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| Error::schema(ptr, "expected an array"))
}

fn number(v: &Value, ptr: &str) -> Result<f64> {
    match v.as_f64() {
        Some(x) if x.is_finite() => Ok(x),
        _ => Err(Error::schema(ptr, "expected a finite number")),
    }
}

fn numbers(v: &Value, ptr: &str) -> Result<Vec<f64>> {
    array(v, ptr)?
        .iter()
        .enumerate()
        .map(|(i, x)| number(x, &format!("{ptr}/{i}")))
        .collect()
}

fn fixed<const N: usize>(v: &Value, ptr: &str) -> Result<[f64; N]> {
    let xs = numbers(v, ptr)?;
    xs.try_into()
        .map_err(|xs: Vec<f64>| Error::schema(ptr, format!("expected {N} numbers, got {}", xs.len())))
}

fn escape(key: &str) -> String {
    key.replace('~', "~0").replace('/', "~1")
}

fn unit_quat(q: [f64; 4], ptr: &str) -> Result<[f64; 4]> {
    let n = quat::norm(&q);
    let dev = (n - 1.0).abs();
    if !(dev <= UNIT_TOL) {
        return Err(Error::schema(ptr, format!("quaternion norm {n} is not within {UNIT_TOL:e} of 1")));
    }
    if dev > RENORMALIZE_TOL {
        warn!("{ptr}: renormalizing quaternion with norm {n}");
        return Ok(quat::normalized(&q));
    }
    Ok(q)
}

fn parse_demo(v: &Value, ptr: &str, index: usize) -> Result<Demonstration> {
    let obj = object(v, ptr)?;
    let time = numbers(field(obj, ptr, "time")?, &format!("{ptr}/time"))?;
    let gripper = numbers(field(obj, ptr, "gripper")?, &format!("{ptr}/gripper"))?;
    let poses_ptr = format!("{ptr}/poses");
    let poses = array(field(obj, ptr, "poses")?, &poses_ptr)?
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let p_ptr = format!("{poses_ptr}/{i}");
            let a = fixed::<7>(p, &p_ptr)?;
            let q = unit_quat([a[3], a[4], a[5], a[6]], &p_ptr)?;
            Ok(Pose::new(Vector3::new(a[0], a[1], a[2]), q))
        })
        .collect::<Result<Vec<_>>>()?;
    if time.len() != poses.len() || gripper.len() != poses.len() {
        return Err(Error::schema(
            ptr,
            format!(
                "demo {index}: array lengths differ (time {}, poses {}, gripper {})",
                time.len(),
                poses.len(),
                gripper.len()
            ),
        ));
    }
    if poses.len() < 2 {
        return Err(Error::schema(&poses_ptr, format!("demo {index}: needs at least two samples")));
    }
    if time.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::schema(format!("{ptr}/time"), format!("demo {index}: time must be strictly increasing")));
    }
    let frames_ptr = format!("{ptr}/frames");
    let mut frames = BTreeMap::new();
    for (id, f) in object(field(obj, ptr, "frames")?, &frames_ptr)? {
        let f_ptr = format!("{frames_ptr}/{}", escape(id));
        let fo = object(f, &f_ptr)?;
        let rotation = unit_quat(fixed::<4>(field(fo, &f_ptr, "rotation")?, &format!("{f_ptr}/rotation"))?, &format!("{f_ptr}/rotation"))?;
        let origin = fixed::<3>(field(fo, &f_ptr, "origin")?, &format!("{f_ptr}/origin"))?;
        frames.insert(id.clone(), FrameInstance::new(rotation, Vector3::from(origin))?);
    }
    let mut demo = Demonstration {
        time,
        poses,
        gripper,
        frames,
    };
    demo.make_continuous();
    Ok(demo)
}

/// Parses a dataset document. Quaternion trajectories are made sign
/// continuous.
pub fn dataset_from_json(v: &Value) -> Result<DemonstrationSet> {
    let obj = object(v, "")?;
    match field(obj, "", "schema")?.as_str() {
        Some(DATASET_SCHEMA) => {}
        Some(s) => return Err(Error::schema("/schema", format!("unsupported schema '{s}', expected '{DATASET_SCHEMA}'"))),
        None => return Err(Error::schema("/schema", "expected a string")),
    }
    let dt = number(field(obj, "", "dt")?, "/dt")?;
    if dt <= 0.0 {
        return Err(Error::schema("/dt", "dt must be positive"));
    }
    let demos = array(field(obj, "", "demos")?, "/demos")?;
    if demos.is_empty() {
        return Err(Error::schema("/demos", "no demonstrations"));
    }
    let demos = demos
        .iter()
        .enumerate()
        .map(|(i, d)| parse_demo(d, &format!("/demos/{i}"), i))
        .collect::<Result<Vec<_>>>()?;
    Ok(DemonstrationSet { dt, demos })
}

pub fn dataset_to_json(set: &DemonstrationSet) -> Value {
    let demos: Vec<Value> = set
        .demos
        .iter()
        .map(|d| {
            let frames: Map<String, Value> = d
                .frames
                .iter()
                .map(|(id, f)| (id.clone(), json!({"rotation": f.rotation, "origin": [f.origin.x, f.origin.y, f.origin.z]})))
                .collect();
            json!({
                "time": d.time,
                "poses": d.poses.iter().map(|p| p.to_array()).collect::<Vec<_>>(),
                "gripper": d.gripper,
                "frames": frames,
            })
        })
        .collect();
    json!({"schema": DATASET_SCHEMA, "dt": set.dt, "demos": demos})
}

pub fn load_dataset(path: &Path) -> Result<DemonstrationSet> {
    let text = fs::read_to_string(path)?;
    dataset_from_json(&serde_json::from_str(&text)?)
}

pub fn save_dataset(path: &Path, set: &DemonstrationSet) -> Result<()> {
    write_json(path, &dataset_to_json(set))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(v: &Value, ptr: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let data = array(v, ptr)?;
    if data.len() != rows {
        return Err(Error::schema(ptr, format!("expected {rows} rows, got {}", data.len())));
    }
    let mut m = DMatrix::zeros(rows, cols);
    for (i, row) in data.iter().enumerate() {
        let r_ptr = format!("{ptr}/{i}");
        let xs = numbers(row, &r_ptr)?;
        if xs.len() != cols {
            return Err(Error::schema(r_ptr, format!("expected {cols} columns, got {}", xs.len())));
        }
        for (j, x) in xs.into_iter().enumerate() {
            m[(i, j)] = x;
        }
    }
    Ok(m)
}

fn skill_to_json(s: &SkillModel) -> Value {
    let components: Vec<Value> = s
        .hmm
        .components
        .iter()
        .map(|c| json!({"mean": c.mean.as_slice(), "cov": matrix_rows(&c.cov)}))
        .collect();
    json!({
        "driver": s.driver,
        "selected_frames": s.selected_frames,
        "t_bar": s.t_bar,
        "dt": s.dt,
        "manifold": s.hmm.manifold,
        "priors": s.hmm.priors.as_slice(),
        "transitions": matrix_rows(&s.hmm.transitions),
        "components": components,
    })
}

fn skill_from_json(v: &Value, ptr: &str) -> Result<SkillModel> {
    let obj = object(v, ptr)?;
    let typed = |key: &str| -> Result<&Value> { field(obj, ptr, key) };
    let driver: Driver = serde_json::from_value(typed("driver")?.clone())
        .map_err(|e| Error::schema(format!("{ptr}/driver"), e.to_string()))?;
    let selected_frames: Vec<String> = serde_json::from_value(typed("selected_frames")?.clone())
        .map_err(|e| Error::schema(format!("{ptr}/selected_frames"), e.to_string()))?;
    let t_bar = typed("t_bar")?
        .as_u64()
        .ok_or_else(|| Error::schema(format!("{ptr}/t_bar"), "expected a non-negative integer"))? as usize;
    let dt = number(typed("dt")?, &format!("{ptr}/dt"))?;
    let manifold: ManifoldDescriptor = serde_json::from_value(typed("manifold")?.clone())
        .map_err(|e| Error::schema(format!("{ptr}/manifold"), e.to_string()))?;
    let priors = DVector::from_vec(numbers(typed("priors")?, &format!("{ptr}/priors"))?);
    let k = priors.len();
    let transitions = matrix_from_rows(typed("transitions")?, &format!("{ptr}/transitions"), k, k)?;
    let c_ptr = format!("{ptr}/components");
    let components = array(typed("components")?, &c_ptr)?
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let p = format!("{c_ptr}/{i}");
            let co = object(c, &p)?;
            let mean = numbers(field(co, &p, "mean")?, &format!("{p}/mean"))?;
            if mean.len() != manifold.ambient_dim() {
                return Err(Error::schema(format!("{p}/mean"), format!("expected {} numbers", manifold.ambient_dim())));
            }
            let d = manifold.tangent_dim();
            let cov = matrix_from_rows(field(co, &p, "cov")?, &format!("{p}/cov"), d, d)?;
            Ok(RiemannianGaussian {
                manifold: manifold.clone(),
                mean: DVector::from_vec(mean),
                cov,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let hmm = HMMModel::new(manifold, priors, transitions, components)?;
    Ok(SkillModel {
        driver,
        selected_frames,
        hmm,
        t_bar,
        dt,
    })
}

/// Model document; `config` is embedded verbatim for provenance.
pub fn task_to_json(task: &TaskModel, config: &Value) -> Value {
    json!({
        "schema": MODEL_SCHEMA,
        "config": config,
        "skills": task.skills.iter().map(skill_to_json).collect::<Vec<_>>(),
    })
}

pub fn task_from_json(v: &Value) -> Result<TaskModel> {
    let obj = object(v, "")?;
    if field(obj, "", "schema")?.as_str() != Some(MODEL_SCHEMA) {
        return Err(Error::schema("/schema", format!("expected '{MODEL_SCHEMA}'")));
    }
    let skills = array(field(obj, "", "skills")?, "/skills")?
        .iter()
        .enumerate()
        .map(|(i, s)| skill_from_json(s, &format!("/skills/{i}")))
        .collect::<Result<Vec<_>>>()?;
    TaskModel::new(skills)
}

pub fn load_task(path: &Path) -> Result<TaskModel> {
    let text = fs::read_to_string(path)?;
    task_from_json(&serde_json::from_str(&text)?)
}

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Pretty JSON with sorted keys and a trailing newline.
pub fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    // Round-tripping through `Value` sorts the keys of every map.
    let v = serde_json::to_value(value)?;
    let mut bytes = serde_json::to_vec_pretty(&v)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_bytes(value)?)
}

/// RFC 4180 CSV with a header row.
pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[S], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header.iter().map(|h| h.as_ref()))?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::Dimension {
                context: "CSV row",
                expected: header.len(),
                got: r.len(),
            });
        }
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{pick_and_place, ScenarioSpec};

    fn small_set() -> DemonstrationSet {
        let spec = ScenarioSpec { demos: 2, ..pick_and_place() };
        spec.generate().unwrap().0
    }

    #[test]
    fn dataset_roundtrip() {
        let set = small_set();
        let back = dataset_from_json(&dataset_to_json(&set)).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn non_unit_quaternion_is_rejected_with_pointer() {
        let mut v = dataset_to_json(&small_set());
        let q = &mut v["demos"][1]["poses"][3];
        for i in 3..7 {
            q[i] = json!(q[i].as_f64().unwrap() * 1.01);
        }
        match dataset_from_json(&v) {
            Err(Error::Schema { pointer, .. }) => assert_eq!(pointer, "/demos/1/poses/3"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tiny_norm_error_is_renormalized() {
        let mut v = dataset_to_json(&small_set());
        let q = &mut v["demos"][0]["poses"][0];
        for i in 3..7 {
            q[i] = json!(q[i].as_f64().unwrap() * (1.0 + 1e-7));
        }
        let set = dataset_from_json(&v).unwrap();
        assert!((quat::norm(&set.demos[0].poses[0].quat) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mixed_lengths_name_the_demo() {
        let mut v = dataset_to_json(&small_set());
        v["demos"][1]["gripper"].as_array_mut().unwrap().pop();
        let err = dataset_from_json(&v).unwrap_err().to_string();
        assert!(err.contains("/demos/1") && err.contains("demo 1"), "{err}");
    }

    #[test]
    fn missing_field_and_bad_schema() {
        let mut v = dataset_to_json(&small_set());
        v["demos"][0].as_object_mut().unwrap().remove("frames");
        assert!(dataset_from_json(&v).unwrap_err().to_string().contains("/demos/0/frames"));
        let mut v = dataset_to_json(&small_set());
        v["schema"] = json!("other/2");
        assert!(dataset_from_json(&v).is_err());
    }

    #[test]
    fn sign_flips_are_made_continuous() {
        let mut v = dataset_to_json(&small_set());
        let q = &mut v["demos"][0]["poses"][5];
        for i in 3..7 {
            q[i] = json!(-q[i].as_f64().unwrap());
        }
        let set = dataset_from_json(&v).unwrap();
        let d = &set.demos[0];
        assert!(quat::dot(&d.poses[4].quat, &d.poses[5].quat) > 0.0);
    }

    #[test]
    fn model_roundtrip() {
        let set = small_set();
        let cfg = crate::pipeline::PipelineConfig::default();
        let task = crate::pipeline::train(&set, &cfg).unwrap().task;
        let doc = task_to_json(&task, &json!({"k": 5}));
        let back = task_from_json(&serde_json::from_slice(&to_json_bytes(&doc).unwrap()).unwrap()).unwrap();
        assert_eq!(back, task);
    }

    #[test]
    fn json_keys_are_sorted() {
        let mut m = BTreeMap::new();
        m.insert("b", 1);
        m.insert("a", 2);
        let s = String::from_utf8(to_json_bytes(&json!({"z": 0, "y": m})).unwrap()).unwrap();
        assert!(s.find("\"y\"").unwrap() < s.find("\"z\"").unwrap());
        assert!(s.find("\"a\"").unwrap() < s.find("\"b\"").unwrap());
    }

    #[test]
    fn atomic_writes_replace_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_csv(&path, &["a", "b"], &[vec!["1".into(), "x,y".into()]]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "a,b\n1,\"x,y\"\n");
        assert!(write_csv(&path, &["a", "b"], &[vec!["1".into()]]).is_err());
        assert_eq!(fs::read_to_string(&path).unwrap(), "a,b\n1,\"x,y\"\n");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
