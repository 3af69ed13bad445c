//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use fieldline::backend::{
    baseline_edge_watershed, BaselineBackend, BaselineConfig, DetectionSet, FieldInstance,
};
use fieldline::datagen::{rasterize_parcels, Parcel};
use fieldline::eval::{bench, boundary_semantic_iou, coco_thresholds, evaluate, EvalConfig};
use fieldline::mask::{mask_iou, mask_union, rle_decode, rle_encode, Bitmap, InstanceMask};
use fieldline::pipeline::{delineate_patch, segment_tiled, BackendConfig, PipelineConfig, Threads};
use fieldline::raster::{write_png, PixelRect};
use fieldline::stitch::StitchConfig;
use fieldline::vector::{signed_area, to_field_polygons, trace_contours};
use fieldline::Error;
use rand::Rng;

const AP_TOL: f64 = 1e-9;
const IOU_TOL: f64 = 1e-12;
const TILED_MIN_IOU: f64 = 0.9;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn c1_evaluator_oracle() -> Outcome {
    let mut rng = common::rng(1);
    let thresholds = coco_thresholds();
    let cfg = EvalConfig::default();
    let mut scenes = 0;
    let mut aps = 0;
    let mut undefined = 0;
    while scenes < 200 {
        let n_img = rng.gen_range(1..=20);
        let (gts, preds): (Vec<_>, Vec<_>) = (0..n_img).map(|_| common::random_image(&mut rng)).unzip();
        scenes += 1;
        let n_gt: usize = gts.iter().map(|g: &DetectionSet| g.instances.len()).sum();
        let report = evaluate(&gts, &preds, &cfg);
        if n_gt == 0 {
            ensure!(matches!(report, Err(Error::UndefinedAp)), "scene {scenes}: expected UndefinedAp");
            undefined += 1;
            continue;
        }
        let report = report.map_err(err)?;
        let oracle = common::oracle_ap(&gts, &preds, &thresholds, cfg.max_detections_per_image);
        for (got, want) in report.ap_per_threshold.iter().zip(&oracle) {
            ensure!(
                (got.ap - want).abs() <= AP_TOL,
                "scene {scenes} thr {}: ap {} vs oracle {}",
                got.thr,
                got.ap,
                want
            );
            aps += 1;
        }
        ensure!((report.map50 - oracle[0]).abs() <= AP_TOL, "scene {scenes}: map50");
        let mean = oracle.iter().sum::<f64>() / oracle.len() as f64;
        ensure!((report.map50_95 - mean).abs() <= AP_TOL, "scene {scenes}: map50_95");
    }
    Ok(format!("{scenes} scenes, {aps} APs within {AP_TOL:e} ({undefined} without ground truth)"))
}

fn c2_self_identity() -> Outcome {
    let mut rng = common::rng(2);
    let gts: Vec<DetectionSet> = (0..10)
        .map(|_| common::random_image(&mut rng).0)
        .filter(|g| !g.instances.is_empty())
        .collect();
    let cfg = EvalConfig::default();
    let same = evaluate(&gts, &gts, &cfg).map_err(err)?;
    ensure!(
        same.map50 == 1.0 && same.map50_95 == 1.0,
        "self evaluation gave {} / {}",
        same.map50,
        same.map50_95
    );
    let empty: Vec<DetectionSet> = gts.iter().map(|g| DetectionSet::empty(g.width, g.height)).collect();
    let none = evaluate(&gts, &empty, &cfg).map_err(err)?;
    ensure!(
        none.map50 == 0.0 && none.map50_95 == 0.0,
        "empty predictions gave {} / {}",
        none.map50,
        none.map50_95
    );
    Ok(format!("{} images: 1.0/1.0 self, 0.0/0.0 empty", gts.len()))
}

fn single(w: u32, h: u32, rects: &[PixelRect]) -> DetectionSet {
    DetectionSet {
        width: w,
        height: h,
        instances: rects
            .iter()
            .enumerate()
            .map(|(i, &r)| FieldInstance {
                id: i as u64,
                mask: InstanceMask::from_rect(w, h, r),
                score: Some(1.0),
            })
            .collect(),
    }
}

fn c3_metric_ordering() -> Outcome {
    let n = 50u32;
    let mut notes = Vec::new();
    for s in 1..=3u32 {
        let gt = single(80, 80, &[PixelRect::new(10, 10, n, n)]);
        let pred = single(80, 80, &[PixelRect::new(10 + s, 10, n, n)]);
        let iou = mask_iou(&gt.instances[0].mask, &pred.instances[0].mask).map_err(err)?;
        let want = (n - s) as f64 / (n + s) as f64;
        ensure!((iou - want).abs() <= IOU_TOL, "shift {s}: iou {iou} vs {want}");
        let b = boundary_semantic_iou(&[gt], &[pred], 1).map_err(err)?.mean;
        ensure!(b < 0.5, "shift {s}: boundary iou {b} >= 0.5");
        notes.push(format!("s={s} iou={iou:.4} biou={b:.4}"));
    }
    let gt = single(120, 80, &[PixelRect::new(10, 10, 50, 50), PixelRect::new(60, 10, 50, 50)]);
    let pred = single(120, 80, &[PixelRect::new(10, 10, 100, 50)]);
    let best = gt
        .instances
        .iter()
        .map(|g| mask_iou(&g.mask, &pred.instances[0].mask).unwrap())
        .fold(0.0, f64::max);
    ensure!(best == 0.5, "merged best-match iou {best}");
    let b = boundary_semantic_iou(&[gt], &[pred], 1).map_err(err)?.mean;
    ensure!((b - 296.0 / 392.0).abs() <= IOU_TOL, "merged boundary iou {b}");
    notes.push(format!("merged iou={best} biou={b:.4}"));
    Ok(notes.join(", "))
}

fn random_bitmap(rng: &mut rand_chacha::ChaCha8Rng) -> Bitmap {
    let w = rng.gen_range(1..=128);
    let h = rng.gen_range(1..=128);
    match rng.gen_range(0..3) {
        0 => {
            let p = rng.gen_range(0.0..1.0);
            let bits = (0..w * h).map(|_| rng.gen_bool(p)).collect();
            Bitmap::from_vec(w, h, bits).unwrap()
        }
        1 => {
            let mut bm = Bitmap::new(w, h);
            for _ in 0..rng.gen_range(0..12) {
                let (x0, y0) = (rng.gen_range(0..w), rng.gen_range(0..h));
                let (x1, y1) = (rng.gen_range(x0..w), rng.gen_range(y0..h));
                let on = rng.gen_bool(0.7);
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        bm.set(x, y, on);
                    }
                }
            }
            bm
        }
        _ => {
            // coarse noise upsampled: blobby shapes with holes
            let cell = rng.gen_range(2..=8);
            let (cw, ch) = (w / cell + 1, h / cell + 1);
            let coarse: Vec<bool> = (0..cw * ch).map(|_| rng.gen_bool(0.5)).collect();
            Bitmap::from_fn(w, h, |x, y| coarse[((y / cell) * cw + x / cell) as usize])
        }
    }
}

fn c4_polygonization() -> Outcome {
    let mut rng = common::rng(4);
    let mut polys = 0;
    for k in 0..1000 {
        let bm = random_bitmap(&mut rng);
        let (w, h) = (bm.width(), bm.height());
        let mask = rle_encode(&bm);
        if mask.is_empty() {
            ensure!(matches!(trace_contours(&mask), Err(Error::EmptyMask)), "mask {k}: empty mask traced");
            continue;
        }
        let traced = trace_contours(&mask).map_err(err)?;
        let net: f64 = traced
            .iter()
            .map(|p| signed_area(&p.exterior) + p.holes.iter().map(|r| signed_area(r)).sum::<f64>())
            .sum();
        ensure!(net == mask.area() as f64, "mask {k}: net area {net} vs {} px", mask.area());

        let dets = DetectionSet {
            width: w,
            height: h,
            instances: vec![FieldInstance { id: 0, mask: mask.clone(), score: None }],
        };
        let fp = to_field_polygons(&dets, None, 0.0).map_err(err)?;
        let total: f64 = fp.iter().map(|p| p.area).sum();
        ensure!(total == mask.area() as f64, "mask {k}: field polygon area {total}");

        let parcels: Vec<Parcel> = traced
            .iter()
            .map(|p| std::iter::once(p.exterior.clone()).chain(p.holes.iter().cloned()).collect())
            .collect();
        polys += parcels.len();
        let raster = rasterize_parcels(&parcels, None, w, h).map_err(err)?;
        ensure!(raster.warnings.is_empty(), "mask {k}: traced polygons overlap");
        let ms: Vec<InstanceMask> = raster.masks.into_iter().map(|(_, m)| m).collect();
        let back = mask_union(&ms).map_err(err)?;
        ensure!(back == mask, "mask {k} ({w}x{h}): re-rasterization differs");
    }
    Ok(format!("1000 masks, {polys} polygons, exact area and re-rasterization"))
}

fn oracle_counts(bm: &Bitmap) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut cur = false;
    let mut run = 0u32;
    for x in 0..bm.width() {
        for y in 0..bm.height() {
            if bm.get(x, y) != cur {
                counts.push(run);
                run = 0;
                cur = !cur;
            }
            run += 1;
        }
    }
    counts.push(run);
    counts
}

fn c5_rle_roundtrip() -> Outcome {
    let mut rng = common::rng(5);
    for k in 0..10_000 {
        let bm = random_bitmap(&mut rng);
        let (w, h) = (bm.width(), bm.height());
        let m = rle_encode(&bm);
        let sum: u64 = m.counts().iter().map(|&c| c as u64).sum();
        ensure!(sum == w as u64 * h as u64, "bitmap {k}: counts sum {sum} != {}", w * h);
        ensure!(m.counts() == oracle_counts(&bm).as_slice(), "bitmap {k}: counts differ from oracle");
        let back = rle_decode(w, h, m.counts()).map_err(err)?;
        ensure!(back == bm, "bitmap {k}: decode differs");
        ensure!(m.area() == bm.count(), "bitmap {k}: area");
    }
    Ok("10000 bitmaps".into())
}

fn c6_tiling() -> Outcome {
    let mut rng = common::rng(6);
    let fields = common::partition(&mut rng, 2048, 2048, 40, 448);
    let scene = common::field_scene(&mut rng, 2048, 2048, &fields);
    let mut cfg = PipelineConfig {
        backend: BackendConfig::Baseline(BaselineConfig::default()),
        tile_px: 512,
        overlap_px: 64,
        ..PipelineConfig::default()
    };
    let backend = cfg.backend.build().map_err(err)?;
    let mut run = |threads: usize| -> Result<(DetectionSet, Vec<u8>), String> {
        cfg.threads = Threads::Count(threads);
        let d = delineate_patch(&scene, backend.as_ref(), &cfg).map_err(err)?;
        Ok((d.detections, serde_json::to_vec(&d.geojson).map_err(err)?))
    };
    let (tiled, a) = run(1)?;
    let (_, b) = run(8)?;
    ensure!(a == b, "GeoJSON differs between 1 and 8 threads");

    let whole = baseline_edge_watershed(&scene, &BaselineConfig::default()).map_err(err)?;
    ensure!(
        whole.instances.len() == tiled.instances.len(),
        "untiled {} instances vs tiled {}",
        whole.instances.len(),
        tiled.instances.len()
    );
    let mut worst: f64 = 1.0;
    for w in &whole.instances {
        let best = tiled
            .instances
            .iter()
            .map(|t| mask_iou(&w.mask, &t.mask).unwrap())
            .fold(0.0, f64::max);
        worst = worst.min(best);
    }
    ensure!(worst >= TILED_MIN_IOU, "worst counterpart IoU {worst}");
    let again = segment_tiled(&scene, &BaselineBackend::default(), 512, 64, &StitchConfig::default(), 3)
        .map_err(err)?;
    ensure!(again == tiled, "detections differ with 3 threads");
    Ok(format!(
        "{} fields, {} instances, byte-identical GeoJSON ({} bytes), worst IoU {worst:.4}",
        fields.len(),
        whole.instances.len(),
        a.len()
    ))
}

/// Even-odd test of one pixel center against a closed ring; a center on a
/// left or top edge counts as inside, on a right or bottom edge as outside.
fn oracle_pixel(ring: &[(f64, f64)], x: u32, y: u32) -> bool {
    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
    let mut inside = false;
    for e in ring.windows(2) {
        let ((x0, y0), (x1, y1)) = (e[0], e[1]);
        if (y0 > cy) != (y1 > cy) {
            let xi = x0 + (cy - y0) * (x1 - x0) / (y1 - y0);
            if cx < xi {
                inside = !inside;
            }
        }
    }
    inside
}

fn center_on_boundary(ring: &[(f64, f64)], x: u32, y: u32) -> bool {
    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
    ring.windows(2).any(|e| {
        let ((x0, y0), (x1, y1)) = (e[0], e[1]);
        (x1 - x0) * (cy - y0) == (y1 - y0) * (cx - x0)
            && cx >= x0.min(x1)
            && cx <= x0.max(x1)
            && cy >= y0.min(y1)
            && cy <= y0.max(y1)
    })
}

fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn c7_rasterization_oracle() -> Outcome {
    let mut rng = common::rng(7);
    let (w, h) = (64u32, 64u32);
    let mut ties = 0;
    let mut done = 0;
    while done < 500 {
        let n = rng.gen_range(3..=10);
        // half-pixel lattice so pixel centers land on edges and vertices
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen_range(-8..=136) as f64 / 2.0, rng.gen_range(-8..=136) as f64 / 2.0))
            .collect();
        let mut ring = convex_hull(pts);
        if ring.len() < 3 {
            continue;
        }
        if rng.gen_bool(0.5) {
            ring.reverse();
        }
        ring.push(ring[0]);
        done += 1;
        let raster = rasterize_parcels(&[vec![ring.clone()]], None, w, h).map_err(err)?;
        let got = raster
            .masks
            .first()
            .map(|(_, m)| m.to_bitmap())
            .unwrap_or_else(|| Bitmap::new(w, h));
        for y in 0..h {
            for x in 0..w {
                let want = oracle_pixel(&ring, x, y);
                ties += center_on_boundary(&ring, x, y) as usize;
                ensure!(
                    got.get(x, y) == want,
                    "parcel {done} pixel ({x},{y}): got {} want {want}; ring {ring:?}",
                    got.get(x, y)
                );
            }
        }
    }
    Ok(format!("500 convex parcels, {ties} edge-tie pixels checked"))
}

fn c8_bench() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut rng = common::rng(8);
    let mut paths = Vec::new();
    for i in 0..4 {
        let fields = common::partition(&mut rng, 256, 256, 6, 128);
        let scene = common::field_scene(&mut rng, 256, 256, &fields);
        let p = dir.path().join(format!("scene{i}.png"));
        write_png(&p, &scene).map_err(err)?;
        paths.push(p);
    }
    let cfg = PipelineConfig {
        tile_px: 128,
        overlap_px: 16,
        ..PipelineConfig::default()
    };
    let backend = cfg.backend.build().map_err(err)?;
    let stats = bench(&paths, 1, |p| {
        fieldline::pipeline::delineate_file(p, backend.as_ref(), &cfg).map(|_| ())
    })
    .map_err(err)?;
    ensure!(stats.samples == 3, "expected 3 timed runs, got {}", stats.samples);
    ensure!(
        stats.min <= stats.p50 && stats.p50 <= stats.p95 && stats.p95 <= stats.max && stats.mean > 0.0,
        "inconsistent latency stats {stats:?}"
    );
    ensure!(
        matches!(bench(&[], 0, |_| Ok(())), Err(Error::EmptyBenchmark)),
        "empty input list must be an error"
    );
    Ok(format!(
        "mean {:.1} ms, p50 {:.1} ms, p95 {:.1} ms over {} runs",
        stats.mean, stats.p50, stats.p95, stats.samples
    ))
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("1 evaluator oracle equivalence", c1_evaluator_oracle),
        ("2 self-evaluation identity", c2_self_identity),
        ("3 boundary vs instance IoU ordering", c3_metric_ordering),
        ("4 polygonization exactness", c4_polygonization),
        ("5 RLE round-trip", c5_rle_roundtrip),
        ("6 tiling determinism and fidelity", c6_tiling),
        ("7 rasterization oracle", c7_rasterization_oracle),
        ("8 latency harness", c8_bench),
    ];
    let results: Vec<(Outcome, Duration)> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria
            .iter()
            .map(|&(_, f)| {
                s.spawn(move || {
                    let t = Instant::now();
                    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
                        Err(p
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_else(|| "panic".into()))
                    });
                    (r, t.elapsed())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut failed = 0;
    for ((name, _), (r, dt)) in criteria.iter().zip(results) {
        match r {
            Ok(msg) => println!("PASS criterion {name}: {msg} [{:.2}s]", dt.as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name}: {msg} [{:.2}s]", dt.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all {} acceptance criteria passed", criteria.len());
}
