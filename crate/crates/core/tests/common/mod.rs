#![allow(dead_code)]

use fieldline::backend::{DetectionSet, FieldInstance};
use fieldline::mask::InstanceMask;
use fieldline::raster::{PixelRect, RasterPatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Guillotine partition of `w x h` into at least `min_fields` rectangles no
/// larger than `max_side` on either axis.
pub fn partition(rng: &mut ChaCha8Rng, w: u32, h: u32, min_fields: usize, max_side: u32) -> Vec<PixelRect> {
    let mut rects = vec![PixelRect::new(0, 0, w, h)];
    loop {
        let big = rects
            .iter()
            .position(|r| r.width > max_side || r.height > max_side);
        let idx = match big {
            Some(i) => i,
            None if rects.len() < min_fields => {
                // split the largest remaining rectangle
                (0..rects.len())
                    .max_by_key(|&i| (rects[i].width as u64 * rects[i].height as u64, std::cmp::Reverse(i)))
                    .unwrap()
            }
            None => break,
        };
        let r = rects.swap_remove(idx);
        let vertical = r.width >= r.height;
        let len = if vertical { r.width } else { r.height };
        let cut = rng.gen_range(len * 3 / 10..=len * 7 / 10);
        let (a, b) = if vertical {
            (
                PixelRect::new(r.offset_x, r.offset_y, cut, r.height),
                PixelRect::new(r.offset_x + cut, r.offset_y, r.width - cut, r.height),
            )
        } else {
            (
                PixelRect::new(r.offset_x, r.offset_y, r.width, cut),
                PixelRect::new(r.offset_x, r.offset_y + cut, r.width, r.height - cut),
            )
        };
        rects.push(a);
        rects.push(b);
    }
    rects.sort_by_key(|r| (r.offset_y, r.offset_x));
    rects
}

/// RGB scene: each field a flat colour, 3-px dark seams along field borders.
pub fn field_scene(rng: &mut ChaCha8Rng, w: u32, h: u32, fields: &[PixelRect]) -> RasterPatch {
    let mut colors = Vec::new();
    for _ in fields {
        colors.push([
            rng.gen_range(90u8..=250),
            rng.gen_range(90u8..=250),
            rng.gen_range(90u8..=250),
        ]);
    }
    let mut pixels = vec![0u8; (w * h * 3) as usize];
    for (f, c) in fields.iter().zip(&colors) {
        for y in f.offset_y..f.bottom() {
            for x in f.offset_x..f.right() {
                let seam = (x < f.offset_x + 2 && f.offset_x > 0)
                    || (x + 1 >= f.right() && f.right() < w)
                    || (y < f.offset_y + 2 && f.offset_y > 0)
                    || (y + 1 >= f.bottom() && f.bottom() < h);
                let px = if seam { [20, 20, 20] } else { *c };
                let i = ((y * w + x) * 3) as usize;
                pixels[i..i + 3].copy_from_slice(&px);
            }
        }
    }
    RasterPatch::new(w, h, 3, pixels, None).unwrap()
}

/// Random evaluation image: ground-truth rectangles and perturbed predictions.
pub fn random_image(rng: &mut ChaCha8Rng) -> (DetectionSet, DetectionSet) {
    let w = rng.gen_range(16..=128);
    let h = rng.gen_range(16..=128);
    let rect = |rng: &mut ChaCha8Rng| {
        let rw = rng.gen_range(1..=w.min(40));
        let rh = rng.gen_range(1..=h.min(40));
        PixelRect::new(rng.gen_range(0..=w - rw), rng.gen_range(0..=h - rh), rw, rh)
    };
    let n_gt = rng.gen_range(0..=15);
    let mut gt = DetectionSet::empty(w, h);
    for id in 0..n_gt {
        let r = rect(rng);
        gt.instances.push(FieldInstance {
            id: id as u64,
            mask: InstanceMask::from_rect(w, h, r),
            score: None,
        });
    }
    let mut pred = DetectionSet::empty(w, h);
    let n_pred = rng.gen_range(0..=15);
    for id in 0..n_pred {
        let r = if !gt.instances.is_empty() && rng.gen_bool(0.7) {
            let g = gt.instances[rng.gen_range(0..gt.instances.len())].mask.bbox().unwrap();
            let dx = rng.gen_range(-3i64..=3);
            let dy = rng.gen_range(-3i64..=3);
            let x0 = (g.offset_x as i64 + dx).clamp(0, w as i64 - 1) as u32;
            let y0 = (g.offset_y as i64 + dy).clamp(0, h as i64 - 1) as u32;
            let rw = (g.width as i64 + rng.gen_range(-2i64..=2)).clamp(1, (w - x0) as i64) as u32;
            let rh = (g.height as i64 + rng.gen_range(-2i64..=2)).clamp(1, (h - y0) as i64) as u32;
            PixelRect::new(x0, y0, rw, rh)
        } else {
            rect(rng)
        };
        // coarse scores so that ties occur
        let score = rng.gen_range(0..=10) as f64 / 10.0;
        pred.instances.push(FieldInstance {
            id: id as u64,
            mask: InstanceMask::from_rect(w, h, r),
            score: Some(score),
        });
    }
    (gt, pred)
}

struct Bits {
    words: Vec<u64>,
    count: u64,
}

fn bits_of(m: &InstanceMask) -> Bits {
    let bm = m.to_bitmap();
    let mut words = vec![0u64; (bm.bits().len() + 63) / 64];
    for (i, &b) in bm.bits().iter().enumerate() {
        if b {
            words[i / 64] |= 1 << (i % 64);
        }
    }
    Bits {
        count: bm.count(),
        words,
    }
}

/// Brute-force evaluator: exhaustive pixel-counted IoU matrix, greedy
/// matching, direct PR construction and 101-point interpolation.
pub fn oracle_ap(gts: &[DetectionSet], preds: &[DetectionSet], thresholds: &[f64], max_dets: usize) -> Vec<f64> {
    struct Img {
        ious: Vec<Vec<f64>>,
        scores: Vec<f64>,
        n_gt: usize,
    }
    let mut imgs = Vec::new();
    for (g, p) in gts.iter().zip(preds) {
        let mut gi: Vec<&FieldInstance> = g.instances.iter().collect();
        gi.sort_by_key(|x| x.id);
        let mut pi: Vec<&FieldInstance> = p.instances.iter().collect();
        pi.sort_by(|a, b| {
            b.score
                .unwrap()
                .partial_cmp(&a.score.unwrap())
                .unwrap()
                .then(b.mask.area().cmp(&a.mask.area()))
                .then(a.id.cmp(&b.id))
        });
        pi.truncate(max_dets);
        let gb: Vec<Bits> = gi.iter().map(|x| bits_of(&x.mask)).collect();
        let pb: Vec<Bits> = pi.iter().map(|x| bits_of(&x.mask)).collect();
        let ious = pb
            .iter()
            .map(|p| {
                gb.iter()
                    .map(|g| {
                        let inter: u64 = p
                            .words
                            .iter()
                            .zip(&g.words)
                            .map(|(a, b)| (a & b).count_ones() as u64)
                            .sum();
                        let union = p.count + g.count - inter;
                        if union == 0 {
                            0.0
                        } else {
                            inter as f64 / union as f64
                        }
                    })
                    .collect()
            })
            .collect();
        imgs.push(Img {
            ious,
            scores: pi.iter().map(|x| x.score.unwrap()).collect(),
            n_gt: gi.len(),
        });
    }
    let total_gt: usize = imgs.iter().map(|i| i.n_gt).sum();
    thresholds
        .iter()
        .map(|&thr| {
            // (score, image, rank, tp)
            let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();
            for (ii, img) in imgs.iter().enumerate() {
                let mut taken = vec![false; img.n_gt];
                for (p, row) in img.ious.iter().enumerate() {
                    let mut best: Option<usize> = None;
                    for g in 0..img.n_gt {
                        if taken[g] || row[g] < thr {
                            continue;
                        }
                        if best.map_or(true, |b| row[g] > row[b]) {
                            best = Some(g);
                        }
                    }
                    if let Some(g) = best {
                        taken[g] = true;
                    }
                    pooled.push((img.scores[p], ii, p, best.is_some()));
                }
            }
            pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
            let mut pr = Vec::new();
            let mut tp = 0;
            for (k, x) in pooled.iter().enumerate() {
                tp += x.3 as usize;
                pr.push((tp as f64 / total_gt as f64, tp as f64 / (k + 1) as f64));
            }
            (0..=100)
                .map(|i| {
                    let r = i as f64 / 100.0;
                    pr.iter()
                        .filter(|(rec, _)| *rec >= r)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 101.0
        })
        .collect()
}
