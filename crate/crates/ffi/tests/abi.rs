use std::ffi::{CStr, CString};
use std::ptr;

use pathdens_ffi::*;

const INTRO: &str = r#"{
  "field": { "family": "intro_example", "params": {} },
  "measure": { "horizon": 2.0 },
  "config": { "tau": 2.0, "tau0": 1.0, "seed": 7, "steps": 200 },
  "x0": [1.0]
}"#;

fn last_error() -> String {
    let p = pd_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn scenario(json: &str) -> Result<*mut PdScenario, PdStatus> {
    let c = CString::new(json).unwrap();
    let mut sc = ptr::null_mut();
    match unsafe { pd_scenario_from_json(c.as_ptr(), &mut sc) } {
        PdStatus::Ok => Ok(sc),
        s => {
            assert!(sc.is_null());
            Err(s)
        }
    }
}

#[test]
fn run_and_read_artifacts() {
    let sc = scenario(INTRO).unwrap();
    unsafe {
        let hash = CStr::from_ptr(pd_scenario_hash(sc)).to_str().unwrap().to_string();
        assert_eq!(hash.len(), 64);
        let (mut n, mut d) = (0, 0);
        assert_eq!(pd_scenario_dims(sc, &mut n, &mut d), PdStatus::Ok);
        assert_eq!((n, d), (1, 1));

        let cmd = CString::new("simulate").unwrap();
        let mut sol = ptr::null_mut();
        assert_eq!(pd_run(sc, cmd.as_ptr(), 0, &mut sol), PdStatus::Ok);
        assert!(pd_last_error_message().is_null());
        assert!(CStr::from_ptr(pd_solution_summary(sol)).to_str().unwrap().starts_with("simulate:"));
        assert_eq!(pd_solution_artifact_count(sol), 2);
        let (mut name, mut body) = (ptr::null(), ptr::null());
        assert_eq!(pd_solution_artifact(sol, 0, &mut name, &mut body), PdStatus::Ok);
        assert_eq!(CStr::from_ptr(name).to_str().unwrap(), "path.csv");
        let text = CStr::from_ptr(body).to_str().unwrap();
        assert!(text.starts_with(&format!("# scenario_hash={hash} seed=7\n")));
        assert_eq!(pd_solution_artifact(sol, 2, &mut name, &mut body), PdStatus::OutOfRange);

        let dir = tempfile::tempdir().unwrap();
        let d = CString::new(dir.path().join("out").to_str().unwrap()).unwrap();
        assert_eq!(pd_solution_write(sol, d.as_ptr()), PdStatus::Ok);
        assert_eq!(std::fs::read_to_string(dir.path().join("out/path.csv")).unwrap(), text);
        pd_solution_free(sol);
        pd_scenario_free(sc);
    }
}

#[test]
fn path_copy_matches_artifact() {
    let sc = scenario(INTRO).unwrap();
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(pd_simulate(sc, &mut p), PdStatus::Ok);
        let (mut len, mut dim) = (0, 0);
        assert_eq!(pd_path_shape(p, &mut len, &mut dim), PdStatus::Ok);
        assert_eq!((len, dim), (201, 1));
        let mut t = vec![0.0; len];
        let mut x = vec![0.0; len * dim];
        assert_eq!(pd_path_copy(p, t.as_mut_ptr(), 3, ptr::null_mut(), 0), PdStatus::BufferTooSmall);
        assert_eq!(pd_path_copy(p, t.as_mut_ptr(), len, x.as_mut_ptr(), x.len()), PdStatus::Ok);
        assert_eq!((t[0], t[len - 1]), (0.0, 2.0));
        assert_eq!(x[0], 1.0);

        let cmd = CString::new("simulate").unwrap();
        let mut sol = ptr::null_mut();
        assert_eq!(pd_run(sc, cmd.as_ptr(), 0, &mut sol), PdStatus::Ok);
        let (mut name, mut body) = (ptr::null(), ptr::null());
        pd_solution_artifact(sol, 0, &mut name, &mut body);
        let last = CStr::from_ptr(body).to_str().unwrap().lines().last().unwrap().to_string();
        let xt: f64 = last.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(xt, x[len - 1]);
        pd_solution_free(sol);
        pd_path_free(p);
        pd_scenario_free(sc);
    }
}

#[test]
fn errors_map_to_status() {
    assert_eq!(scenario("{").unwrap_err(), PdStatus::Validation);
    assert_eq!(scenario(&INTRO.replace("intro_example", "nope")).unwrap_err(), PdStatus::Validation);
    assert!(last_error().contains("field.family"));
    let atoms = INTRO.replace("\"horizon\": 2.0", "\"horizon\": 2.0, \"atoms\": [[1.5, 1.0]]");
    assert_eq!(scenario(&atoms).unwrap_err(), PdStatus::Validation);
    assert!(last_error().contains("(A2)"));

    unsafe {
        let mut sc = ptr::null_mut();
        assert_eq!(pd_scenario_from_json(ptr::null(), &mut sc), PdStatus::NullPointer);
        let bad = [0xffu8, 0];
        assert_eq!(pd_scenario_from_json(bad.as_ptr().cast(), &mut sc), PdStatus::InvalidUtf8);
        let mut sol = ptr::null_mut();
        let cmd = CString::new("simulate").unwrap();
        assert_eq!(pd_run(ptr::null(), cmd.as_ptr(), 0, &mut sol), PdStatus::NullPointer);
        assert!(pd_scenario_hash(ptr::null()).is_null());
        assert_eq!(pd_solution_artifact_count(ptr::null()), 0);
        pd_scenario_free(ptr::null_mut());
        pd_solution_free(ptr::null_mut());
        pd_path_free(ptr::null_mut());

        let div = r#"{"field":{"family":"linear","params":{"n":1,"d":1,"a":[1e200],"s":[[0.0]],"b0":[]}},
            "measure":{"horizon":1.0},"config":{"tau":1.0,"steps":64},"x0":[1.0]}"#;
        let sc = scenario(div).unwrap();
        assert_eq!(pd_run(sc, cmd.as_ptr(), 0, &mut sol), PdStatus::Divergence);
        assert!(sol.is_null());
        assert!(last_error().contains("step"));
        let other = CString::new("plot").unwrap();
        assert_eq!(pd_run(sc, other.as_ptr(), 0, &mut sol), PdStatus::Validation);
        pd_scenario_free(sc);
    }
    assert!(!unsafe { CStr::from_ptr(pd_version()) }.to_str().unwrap().is_empty());
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/pathdens.h");
    let text = std::fs::read_to_string(header).unwrap();
    for sym in ["pd_scenario_from_json", "pd_run", "pd_path_copy", "PD_STATUS_DIVERGENCE", "typedef struct PdScenario"]
    {
        assert!(text.contains(sym), "{sym}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(&src, format!("#include \"{header}\"\nint main(void) {{ return pd_version() == 0; }}\n")).unwrap();
    match std::process::Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&src).status() {
        Ok(s) => assert!(s.success()),
        Err(_) => eprintln!("no C compiler; header syntax not checked"),
    }
}
