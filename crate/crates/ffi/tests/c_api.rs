use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use csi_locate::channel_sim::Dataset;
use csi_locate::config::ExperimentConfig;
use csi_locate::experiment::{self, column};
use csi_locate::features::designed_features;
use csi_locate::io::{write_checkpoint, write_dataset};
use csi_locate::model::{FusionKind, InputMode, Model};
use csi_locate::numerics::ComplexMatrix;
use csi_locate::train::Progress;
use csi_locate_ffi::*;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.sim.num_antennas = 2;
    cfg.sim.num_subcarriers = 8;
    cfg.num_train = 60;
    cfg.num_test = 40;
    cfg.posnet.hidden = vec![16, 16];
    cfg.fusion_config.delta = 1;
    cfg.fusion_config.tau = 1;
    cfg
}

struct Fixture {
    _dir: tempfile::TempDir,
    model: Model,
    test: Dataset,
    ckpt: CString,
    data: CString,
}

fn fixture(fusion: FusionKind) -> Fixture {
    let cfg = small_config();
    let (_, test) = experiment::simulate(&cfg).unwrap();
    let model = Model::init(cfg.model_spec(InputMode::Learned, fusion), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let data = dir.path().join("test.csip");
    write_checkpoint(&ckpt, &experiment::checkpoint(&cfg, &model, &Progress::default())).unwrap();
    write_dataset(&data, &test).unwrap();
    let c = |p: &Path| CString::new(p.to_str().unwrap()).unwrap();
    Fixture {
        ckpt: c(&ckpt),
        data: c(&data),
        _dir: dir,
        model,
        test,
    }
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(csl_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn stream_matches_library() {
    let fx = fixture(FusionKind::Combined);
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(csl_model_load(fx.ckpt.as_ptr(), &mut model), CslStatus::Ok);
        let mut info = CslModelInfo::default();
        assert_eq!(csl_model_info(model, &mut info), CslStatus::Ok);
        assert_eq!((info.num_antennas, info.num_subcarriers), (2, 8));
        assert_eq!(info.num_points as usize, fx.model.grid.len());
        assert_eq!(info.history as usize, fx.model.spec.history());

        let mut ds = ptr::null_mut();
        assert_eq!(csl_dataset_load(fx.data.as_ptr(), &mut ds), CslStatus::Ok);
        assert_eq!(csl_dataset_len(ds), fx.test.len());

        let mut stream = ptr::null_mut();
        assert_eq!(csl_stream_new(model, &mut stream), CslStatus::Ok);
        // The stream owns a reference; freeing the model handle is fine.
        csl_model_free(model);

        let traj = fx.test.trajectories()[0].clone();
        let mut reference = fx.model.stream();
        let (mut re, mut im) = (vec![0f32; 16], vec![0f32; 16]);
        let (mut pos, mut ue, mut ts) = ([0f64; 2], 0u32, 0f64);
        let mut ready = 0;
        for i in traj {
            assert_eq!(
                csl_dataset_record(ds, i, re.as_mut_ptr(), im.as_mut_ptr(), pos.as_mut_ptr(), &mut ue, &mut ts),
                CslStatus::Ok
            );
            let r = &fx.test.records[i];
            assert_eq!((ue, ts), (r.ue_id, r.timestamp));
            assert_eq!(pos, r.position_f64());
            let mut est = CslEstimate::default();
            let st = csl_stream_push(stream, re.as_ptr(), im.as_ptr(), ue, ts, &mut est);
            match reference.push(r).unwrap() {
                None => assert_eq!(st, CslStatus::NotReady),
                Some(e) => {
                    assert_eq!(st, CslStatus::Ok, "{}", last_error());
                    assert_eq!([est.x, est.y], e.position);
                    assert_eq!(est.cov[1], e.covariance[0][1]);
                    ready += 1;
                }
            }
        }
        assert!(ready > 0);

        assert_eq!(csl_stream_reset(stream), CslStatus::Ok);
        let mut est = CslEstimate::default();
        assert_eq!(csl_stream_push(stream, re.as_ptr(), im.as_ptr(), 999, 0.0, &mut est), CslStatus::NotReady);
        assert_eq!(csl_stream_push(stream, re.as_ptr(), im.as_ptr(), 5, 0.0, &mut est), CslStatus::Data);
        assert!(last_error().contains("UE"), "{}", last_error());

        csl_stream_free(stream);
        csl_dataset_free(ds);
    }
}

#[test]
fn evaluate_matches_library() {
    let fx = fixture(FusionKind::MapConflation);
    unsafe {
        let (mut model, mut ds) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(csl_model_load(fx.ckpt.as_ptr(), &mut model), CslStatus::Ok);
        assert_eq!(csl_dataset_load(fx.data.as_ptr(), &mut ds), CslStatus::Ok);
        let mut mde = f64::NAN;
        assert_eq!(csl_model_evaluate(model, ds, &mut mde), CslStatus::Ok);
        let want = column(&fx.model, &fx.test, fx.model.spec.history()).unwrap().0.stats.mde;
        assert_eq!(mde, want);
        csl_dataset_free(ds);
        csl_model_free(model);
    }
}

#[test]
fn designed_features_match_library() {
    let fx = fixture(FusionKind::None);
    let r = &fx.test.records[0];
    let mut out = vec![0f32; 8 * 16];
    let st = unsafe {
        csl_designed_features(2, 8, r.h.re().data().as_ptr(), r.h.im().data().as_ptr(), out.as_mut_ptr(), out.len())
    };
    assert_eq!(st, CslStatus::Ok);
    let h: ComplexMatrix<f64> = r.h.cast();
    let want: Vec<f32> = designed_features(&h).unwrap().into_iter().map(|v| v as f32).collect();
    assert_eq!(out, want);

    let short = unsafe {
        csl_designed_features(2, 8, r.h.re().data().as_ptr(), r.h.im().data().as_ptr(), out.as_mut_ptr(), 10)
    };
    assert_eq!(short, CslStatus::InvalidArgument);
}

#[test]
fn errors_are_reported() {
    let fx = fixture(FusionKind::None);
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(csl_model_load(ptr::null(), &mut model), CslStatus::InvalidArgument);
        assert!(model.is_null());
        assert!(last_error().contains("null"));

        // A dataset file is not a checkpoint.
        assert_eq!(csl_model_load(fx.data.as_ptr(), &mut model), CslStatus::Data);
        assert!(model.is_null());
        assert!(!last_error().is_empty());

        let missing = CString::new("/nonexistent/x.csip").unwrap();
        let mut ds = ptr::null_mut();
        assert_eq!(csl_dataset_load(missing.as_ptr(), &mut ds), CslStatus::Data);
        assert_eq!(csl_dataset_len(ds), 0);

        assert_eq!(csl_model_info(ptr::null(), &mut CslModelInfo::default()), CslStatus::InvalidArgument);
        assert_eq!(csl_stream_reset(ptr::null_mut()), CslStatus::InvalidArgument);
        csl_model_free(ptr::null_mut());
        csl_stream_free(ptr::null_mut());
        csl_dataset_free(ptr::null_mut());

        assert_eq!(csl_model_load(fx.ckpt.as_ptr(), &mut model), CslStatus::Ok);
        assert_eq!(last_error(), "");
        csl_model_free(model);
    }
    let v = unsafe { CStr::from_ptr(csl_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = include.join("csi_locate.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["csl_model_load", "csl_stream_push", "csl_last_error", "typedef struct CslModel CslModel"] {
        assert!(text.contains(f), "header lacks {f}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"csi_locate.h\"\n\
         int main(void) {\n\
           CslModel *m = 0; CslEstimate e; CslModelInfo i;\n\
           (void)e; (void)i;\n\
           return csl_model_load(\"x\", &m) == CSL_STATUS_OK;\n\
         }\n",
    )
    .unwrap();
    for (cc, lang) in [("cc", "c"), ("c++", "c++")] {
        let Ok(out) = Command::new(cc)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I"])
            .arg(&include)
            .arg(&src)
            .output()
        else {
            eprintln!("{cc} not available; skipping");
            continue;
        };
        assert!(out.status.success(), "{cc}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
