//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use axum::http::{Method, StatusCode};
use common::{fig3_payload, fixture_files, prepared_project, TestApp};
use intenttune_core::augment::{apply_modify, DetectionBox, Thresholds, DEFAULT_TRIGGER_THRESHOLD};
use intenttune_core::caption::{optimize_keep, Caption, RuleRewriter};
use intenttune_core::dataset::BASE_FOLDER;
use intenttune_core::fixtures::{self, build_portrait_dataset, portrait_fixture};
use intenttune_core::geometry::BBox;
use intenttune_core::imaging;
use intenttune_core::intent::{
    is_allowed, parse_annotated_text, validate_specification, ConceptIntent, Domain, Granularity,
    IntentSpecification, Operation, Region,
};
use intenttune_core::metrics::{controllability_with, stability_with};
use intenttune_core::orchestrator::{preset_hyperparameters, OPTIMIZER_LABEL, SCHEDULER_LABEL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// Brute-force reference formulas, written without the library helpers.

fn oracle_stability(sims: &[Vec<f64>]) -> f64 {
    let m = sims.len() as f64;
    let n = sims[0].len() as f64;
    let mut acc = 0.0;
    for row in sims {
        for v in row {
            acc += v;
        }
    }
    acc / (m * n)
}

fn oracle_controllability(s1: &[f64], s2: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..s1.len() {
        let a = s1[i].exp();
        let b = s2[i].exp();
        acc += a / (a + b);
    }
    acc / s1.len() as f64
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let m = rng.random_range(1..=8);
        let n = rng.random_range(1..=8);
        let grid: Vec<Vec<f64>> =
            (0..m).map(|_| (0..n).map(|_| rng.random_range(-5.0..=5.0)).collect()).collect();
        let idx: Vec<usize> = (0..m).collect();
        let refs: Vec<usize> = (0..n).collect();
        let got = stability_with(&idx, &refs, |&i, &j| Ok::<f64, String>(grid[i][j])).map_err(|e| e.to_string())?;
        worst = worst.max((got - oracle_stability(&grid)).abs());

        let s1: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..=5.0)).collect();
        let s2: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..=5.0)).collect();
        let pairs: Vec<(f64, f64)> = s1.iter().copied().zip(s2.iter().copied()).collect();
        let got = controllability_with(&pairs).map_err(|e| e.to_string())?;
        worst = worst.max((got - oracle_controllability(&s1, &s2)).abs());
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("1000 instances, max deviation {worst:e}"))
}

fn controllability_symmetry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let m = rng.random_range(1..=8);
        let s1: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..=5.0)).collect();
        let s2: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..=5.0)).collect();
        let c = rng.random_range(-5.0..=5.0);
        let ab: Vec<(f64, f64)> = s1.iter().copied().zip(s2.iter().copied()).collect();
        let ba: Vec<(f64, f64)> = ab.iter().map(|&(a, b)| (b, a)).collect();
        let same: Vec<(f64, f64)> = s1.iter().map(|&a| (a, a)).collect();
        let shifted: Vec<(f64, f64)> = ab.iter().map(|&(a, b)| (a + c, b + c)).collect();
        let f = |p: &[(f64, f64)]| controllability_with(p).unwrap();
        worst = worst
            .max((f(&same) - 0.5).abs())
            .max((f(&ab) - (1.0 - f(&ba))).abs())
            .max((f(&ab) - f(&shifted)).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("equal/swap/shift over 1000 instances, max deviation {worst:e}"))
}

fn preset_fidelity() -> Outcome {
    let table = [
        (Domain::Painting, 1e-4, 1e-5, 64, 32),
        (Domain::HumanPortrait, 1e-4, 5e-5, 128, 64),
        (Domain::Character2d, 1e-4, 1e-5, 32, 32),
        (Domain::Product, 1e-4, 5e-5, 64, 32),
    ];
    for (domain, unet, te, dim, alpha) in table {
        let p = preset_hyperparameters(domain).map_err(|e| e.to_string())?;
        ensure(
            (p.unet_lr, p.text_encoder_lr, p.lora_dimension, p.lora_alpha) == (unet, te, dim, alpha),
            || format!("{domain}: {p:?}"),
        )?;
        ensure(p.optimizer_name == "8-bit AdamW" && p.lr_scheduler_name == "cosine annealing with warm restarts", || {
            format!("{domain}: labels {p:?}")
        })?;
    }
    ensure(OPTIMIZER_LABEL == "8-bit AdamW", || OPTIMIZER_LABEL.into())?;
    ensure(SCHEDULER_LABEL == "cosine annealing with warm restarts", || SCHEDULER_LABEL.into())?;
    ensure(preset_hyperparameters(Domain::Other).is_err(), || "other domain has a preset".into())?;
    Ok("4 domains, 16 cells and 2 labels".into())
}

const WORDS: &[&str] = &["keep", "the", "jacket", "hair", "color", "é", "漢字", "(see", "[note]", "[]", "x]", ",", "."];

fn grammar() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let unit = BBox::new(0.1, 0.1, 0.5, 0.5).unwrap();
    for case in 0..500 {
        let n_regions = rng.random_range(0..=9u32);
        let regions: Vec<Region> = (1..=n_regions)
            .map(|k| Region { region_id: k, image_id: format!("img-{k}"), bbox: unit, color_index: (k - 1) as u8 })
            .collect();
        let mut text = String::new();
        let mut expected = Vec::new();
        for _ in 0..rng.random_range(0..30) {
            if n_regions > 0 && rng.random_bool(0.25) {
                let k = rng.random_range(1..=n_regions);
                expected.push((text.len(), k));
                text.push_str(&format!("[{k}]"));
            } else {
                text.push_str(WORDS[rng.random_range(0..WORDS.len())]);
            }
            if rng.random_bool(0.7) {
                text.push(' ');
            }
        }
        let parsed = parse_annotated_text(&text, regions).map_err(|e| format!("case {case} {text:?}: {e}"))?;
        ensure(parsed.reconstruct() == text, || format!("case {case}: reconstruct differs for {text:?}"))?;
        let got: Vec<(usize, u32)> = parsed.links.iter().map(|l| (l.span.start, l.region_id)).collect();
        ensure(got == expected, || format!("case {case}: links {got:?} != {expected:?}"))?;
    }
    ensure(parse_annotated_text("a [3]", vec![]).is_err(), || "dangling [3] accepted".into())?;

    let mut allowed = 0;
    let mut rejected = Vec::new();
    for g in Granularity::ALL {
        for o in Operation::ALL {
            let mut c = ConceptIntent::new("thing", g, o);
            if o == Operation::Modify {
                c = c.with_opposing("red thing", "blue thing");
            }
            let spec = IntentSpecification { domain: Domain::Product, trigger_word: "tok".into(), concepts: vec![c] };
            let ok = validate_specification(spec).is_ok();
            ensure(ok == is_allowed(g, o), || format!("{g}/{o}: validator and matrix disagree"))?;
            if ok {
                allowed += 1;
            } else {
                rejected.push(format!("{g}/{o}"));
            }
        }
    }
    ensure(allowed == 7 && rejected.len() == 2, || format!("{allowed} allowed, rejected {rejected:?}"))?;
    ensure(
        !is_allowed(Granularity::Attribute, Operation::Delete)
            && is_allowed(Granularity::Instance, Operation::Delete)
            && is_allowed(Granularity::Imagery, Operation::Delete),
        || "delete rule".into(),
    )?;
    Ok(format!("500 texts round-trip, 7 allowed, rejected {}", rejected.join(" ")))
}

fn threshold_rule() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let image = imaging::solid(400, 400, [10, 20, 30]);
    let det = |b: BBox| DetectionBox { image_id: "i".into(), concept_name: "jacket".into(), bbox: b, score: 0.9 };
    let mut crops = 0;
    for case in 0..500 {
        let (w, h) = (rng.random_range(0.2..=1.0f64), rng.random_range(0.2..=1.0f64));
        let (x0, y0) = (rng.random_range(0.0..=1.0 - w), rng.random_range(0.0..=1.0 - h));
        let b = BBox::new(x0, y0, (x0 + w).min(1.0), (y0 + h).min(1.0)).unwrap();
        let out = apply_modify(&image, &det(b), DEFAULT_TRIGGER_THRESHOLD, 1).map_err(|e| e.to_string())?;
        let want = b.area_fraction() < 0.40;
        ensure(out.is_some() == want, || format!("case {case}: area {} cropped={}", b.area_fraction(), out.is_some()))?;
        crops += usize::from(want);
    }
    let boundary = BBox::new(0.0, 0.0, 1.0, 0.4).unwrap();
    ensure(boundary.area_fraction() == 0.40, || format!("boundary area {}", boundary.area_fraction()))?;
    let out = apply_modify(&image, &det(boundary), DEFAULT_TRIGGER_THRESHOLD, 1).map_err(|e| e.to_string())?;
    ensure(out.is_none(), || "area 0.40 produced a crop".into())?;
    ensure(Thresholds::default().trigger_threshold == 0.40, || "default threshold".into())?;
    Ok(format!("500 boxes ({crops} cropped), 0.40 boundary not cropped"))
}

fn count_ext(dir: &Path, ext: &str) -> usize {
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            n += count_ext(&p, ext);
        } else if p.extension().is_some_and(|e| e == ext) {
            n += 1;
        }
    }
    n
}

fn augmentation_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fixture = portrait_fixture();
    let report = build_portrait_dataset(&fixture, dir.path()).map_err(|e| e.to_string())?;
    ensure(report.failures.is_empty(), || format!("failures {:?}", report.failures))?;
    let ds = report.dataset;
    ensure(ds.folders() == &fixture.expected_folders, || format!("folders {:?}", ds.folders()))?;

    let padding = Thresholds::default().mask_padding;
    let mut checked = 0;
    for item in ds.in_folder(BASE_FOLDER) {
        let index = item.record.source_image_id.trim_start_matches("img-").parse::<usize>().unwrap() - 1;
        let original = fixtures::render(index);
        let out = ds.load_image(item).map_err(|e| e.to_string())?;
        if !fixtures::LAYOUTS[index].necklace {
            ensure(out == original, || format!("{} changed without a delete box", item.record.relative_path))?;
            continue;
        }
        let mask = fixtures::bbox(fixtures::NECKLACE).padded(padding).to_pixels(fixtures::SIDE, fixtures::SIDE);
        let inside = |x: u32, y: u32| x >= mask.x && x < mask.x + mask.width && y >= mask.y && y < mask.y + mask.height;
        let mut changed_inside = 0;
        for (x, y, p) in out.enumerate_pixels() {
            let same = p == original.get_pixel(x, y);
            if inside(x, y) {
                changed_inside += usize::from(!same);
            } else {
                ensure(same, || format!("{}: pixel ({x},{y}) outside mask changed", item.record.relative_path))?;
            }
        }
        ensure(changed_inside > 0, || format!("{}: mask region unchanged", item.record.relative_path))?;
        let gold = out.pixels().filter(|p| p.0 == [224, 192, 32]).count();
        ensure(gold == 0, || format!("{}: {gold} necklace pixels remain", item.record.relative_path))?;
        checked += 1;
    }
    let pngs = count_ext(dir.path(), "png");
    let txts = count_ext(dir.path(), "txt");
    ensure(pngs == ds.items.len() && txts == pngs, || format!("{pngs} images, {txts} captions, {} items", ds.items.len()))?;
    Ok(format!("folders {:?}, {checked} inpainted images exact outside mask, {txts} sidecars", ds.folders()))
}

fn keep_golden() -> Outcome {
    const INITIAL: &str = "superhero landing, a woman in a black widow suit crouches on the floor, one hand propped up on the floor, looking at the camera, with a door in the background";
    const WANT: &str =
        "superhero landing, a woman in a black widow suit, looking at the camera, with a door in the background";
    let concept = ConceptIntent::new("superhero landing", Granularity::Instance, Operation::Keep)
        .with_keywords(["crouches on the floor", "one hand propped up"]);
    let spec = IntentSpecification {
        domain: Domain::HumanPortrait,
        trigger_word: "superhero landing".into(),
        concepts: vec![concept.clone()],
    };
    let out = optimize_keep(&Caption::plain(INITIAL), &spec, &concept, &RuleRewriter).map_err(|e| e.to_string())?;
    ensure(out.text == WANT, || format!("got {:?}", out.text))?;
    Ok("exact match".into())
}

struct RunArtifacts {
    metric_files: BTreeMap<String, Vec<u8>>,
    covers: Vec<Vec<u8>>,
    series: BTreeMap<String, Vec<u64>>,
    checkpoints: usize,
}

async fn workflow_once() -> Result<RunArtifacts, String> {
    let app = TestApp::new();
    let (pid, _) = prepared_project(&app, "vincent").await;
    let r = app.post(&format!("/api/projects/{pid}/train"), json!({"epochs": 10, "seed": 1234})).await;
    ensure(r.status == StatusCode::ACCEPTED, || format!("train returned {}", r.status))?;
    let rid = r.json()["run_id"].as_str().unwrap().to_string();
    app.drain_events(&rid, Duration::from_secs(60)).await;
    let state = app.get(&format!("/api/runs/{rid}")).await.json();
    ensure(state["status"] == "finished", || format!("status {}", state["status"]))?;

    let mut series = BTreeMap::new();
    for (id, s) in state["series"].as_object().unwrap() {
        let steps: Vec<u64> = s["points"].as_array().unwrap().iter().map(|p| p[0].as_u64().unwrap()).collect();
        series.insert(id.clone(), steps);
    }
    let mut metric_files = BTreeMap::new();
    let metrics_dir = app.dir.path().join("ws/runs").join(&rid).join("metrics");
    for entry in std::fs::read_dir(&metrics_dir).map_err(|e| format!("{}: {e}", metrics_dir.display()))? {
        let p = entry.unwrap().path();
        metric_files.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
    }
    let models = app.get(&format!("/api/projects/{pid}/models")).await.json();
    let mut covers = Vec::new();
    for m in models.as_array().unwrap() {
        let r = app.get(m["cover_url"].as_str().ok_or("checkpoint without cover")?).await;
        ensure(r.status == StatusCode::OK && r.content_type == "image/png", || "cover fetch".into())?;
        covers.push(r.bytes);
    }
    Ok(RunArtifacts { metric_files, covers, series, checkpoints: models.as_array().unwrap().len() })
}

fn deterministic_run(rt: &tokio::runtime::Runtime) -> Outcome {
    let start = Instant::now();
    let a = rt.block_on(workflow_once())?;
    let first = start.elapsed();
    let b = rt.block_on(workflow_once())?;
    ensure(a.checkpoints == 10, || format!("{} checkpoints", a.checkpoints))?;
    ensure(!a.series.is_empty(), || "no series".into())?;
    for (id, steps) in &a.series {
        ensure(steps.len() == 10 && steps.windows(2).all(|w| w[0] < w[1]), || format!("{id}: steps {steps:?}"))?;
    }
    ensure(a.metric_files.len() == a.series.len(), || format!("{} metric files", a.metric_files.len()))?;
    ensure(a.metric_files == b.metric_files, || "metric files differ between runs".into())?;
    ensure(a.covers == b.covers, || "cover images differ between runs".into())?;
    ensure(first < Duration::from_secs(60), || format!("workflow took {first:?}"))?;
    Ok(format!("{} series x 10 points, repeat identical, single run {:.1}s", a.series.len(), first.as_secs_f64()))
}

async fn api_conformance() -> Outcome {
    let app = TestApp::new();
    let (pid, _) = prepared_project(&app, "vincent").await;
    let p = |s: &str| format!("/api/projects/{pid}{s}");
    let r = app.post(&p("/train"), json!({"epochs": 2})).await;
    ensure(r.status == StatusCode::ACCEPTED, || format!("train {}", r.status))?;
    let rid = r.json()["run_id"].as_str().unwrap().to_string();
    let events = app.drain_events(&rid, Duration::from_secs(30)).await;
    ensure(events.iter().any(|e| e["type"] == "metric"), || "no metric events".into())?;
    let models = app.get(&p("/models")).await.json();
    let cid = models[0]["checkpoint_id"].as_str().unwrap().to_string();
    let ev = app.post(&format!("/api/checkpoints/{cid}/evaluate"), json!({"samples": 2})).await;
    ensure(ev.status == StatusCode::OK, || format!("evaluate {}", ev.status))?;
    let values: Vec<f64> = ev.json()["scores"].as_array().unwrap().iter().map(|s| s["value"].as_f64().unwrap()).collect();
    ensure(values.windows(2).all(|w| w[0] >= w[1]), || format!("scores not descending {values:?}"))?;

    let mut dangling = fig3_payload();
    dangling["text"] = json!("Vincent [3]");
    let mut bad_spec = app.get(&p("/spec")).await.json()["spec"].clone();
    bad_spec["concepts"][1]["operation"] = json!("delete");
    let cases: Vec<(Method, String, Option<Value>, StatusCode, &str)> = vec![
        (Method::POST, "/api/projects".into(), Some(json!({"name": "vincent"})), StatusCode::CONFLICT, "duplicate_name"),
        (Method::POST, "/api/projects".into(), Some(json!({"nom": "x"})), StatusCode::UNPROCESSABLE_ENTITY, "invalid_request"),
        (Method::GET, "/api/projects/missing".into(), None, StatusCode::NOT_FOUND, "unknown_project"),
        (Method::POST, p("/intent"), Some(dangling), StatusCode::UNPROCESSABLE_ENTITY, "validation_error"),
        (Method::PUT, p("/spec"), Some(bad_spec), StatusCode::UNPROCESSABLE_ENTITY, "validation_error"),
        (Method::POST, p("/preprocess"), Some(json!({"thresholds": {"trigger_threshold": 0.0}})), StatusCode::UNPROCESSABLE_ENTITY, "invalid_threshold"),
        (Method::PUT, p("/captions"), Some(json!({"relative_path": "base/9999.png", "text": "Vincent, x"})), StatusCode::NOT_FOUND, "unknown_item"),
        (Method::POST, p("/captions/propagate"), Some(json!({"find": "", "replace": "y"})), StatusCode::UNPROCESSABLE_ENTITY, "empty_find"),
        (Method::POST, p("/train"), Some(json!({"unet_lr": -1.0})), StatusCode::UNPROCESSABLE_ENTITY, "invalid_config"),
        (Method::GET, "/api/runs/run-9999".into(), None, StatusCode::NOT_FOUND, "unknown_run"),
        (Method::POST, format!("/api/runs/{rid}/stop"), None, StatusCode::CONFLICT, "invalid_state"),
        (Method::POST, "/api/checkpoints/none/evaluate".into(), Some(json!({})), StatusCode::NOT_FOUND, "unknown_checkpoint"),
        (Method::POST, "/api/checkpoints/none/generate".into(), Some(json!({"prompt": "x"})), StatusCode::NOT_FOUND, "unknown_checkpoint"),
        (Method::GET, "/api/nope".into(), None, StatusCode::NOT_FOUND, "unknown_route"),
    ];
    let n = cases.len();
    for (method, uri, body, status, code) in cases {
        let r = app.call(method.clone(), &uri, body).await;
        let v: Value = serde_json::from_slice(&r.bytes).map_err(|e| format!("{method} {uri}: non-JSON error body ({e})"))?;
        ensure(r.status == status && v["code"] == code, || format!("{method} {uri}: {} {v}", r.status))?;
        ensure(v["message"].as_str().is_some_and(|m| !m.is_empty()) && v.get("detail").is_some(), || {
            format!("{method} {uri}: incomplete error body {v}")
        })?;
    }
    let broken = app.upload(&pid, &[("bad.png".into(), b"nope".to_vec())]).await;
    ensure(broken.status == StatusCode::UNSUPPORTED_MEDIA_TYPE, || format!("upload {}", broken.status))?;
    let fresh = app.post("/api/projects", json!({"name": "empty"})).await.json()["project_id"].as_str().unwrap().to_string();
    let r = app.post(&format!("/api/projects/{fresh}/intent"), fig3_payload()).await;
    ensure(r.status == StatusCode::CONFLICT && r.json()["code"] == "no_images", || format!("no_images {}", r.status))?;
    ensure(app.upload(&fresh, &fixture_files(&portrait_fixture())).await.status == StatusCode::CREATED, || "upload".into())?;
    Ok(format!("workflow ok, {} error paths structured", n + 2))
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let ms = start.elapsed().as_millis();
    match outcome {
        Ok(note) => {
            println!("PASS  {name} ({ms} ms): {note}");
            true
        }
        Err(why) => {
            println!("FAIL  {name} ({ms} ms): {why}");
            false
        }
    }
}

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let results = [
        run("metric oracle equivalence", metric_oracle),
        run("controllability symmetry, swap and shift", controllability_symmetry),
        run("preset fidelity", preset_fidelity),
        run("grammar and validation", grammar),
        run("modify threshold rule", threshold_rule),
        run("augmentation end-to-end", augmentation_end_to_end),
        run("keep caption golden string", keep_golden),
        run("deterministic end-to-end run", || deterministic_run(&rt)),
        run("api conformance", || rt.block_on(api_conformance())),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
