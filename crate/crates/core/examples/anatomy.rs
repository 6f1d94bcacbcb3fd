use dm_core::data::io::load_dataset;
use dm_core::eval::evaluate;
use dm_core::matching::{embed_sfx_index, infer_with_index, temporal_iou, Interval};
use dm_core::model::{DmModel, ModalityMask};

fn main() {
    missed_moment_autopsy();
    let root = std::path::Path::new("/tmp/c4state");
    let ds = load_dataset(&root.join("data/manifest.json")).unwrap();
    let model = DmModel::load(&root.join("trained.dmck")).unwrap();
    let index = embed_sfx_index(&model, &ds.sfx, ModalityMask::default()).unwrap();

    let mut all = Vec::new();
    let (mut n_gt, mut n_pred, mut tp, mut miss_sfx0, mut wrong_sfx, mut bad_loc, mut junk_above) =
        (0, 0, 0, 0, 0, 0, 0);
    for v in ds.videos.iter() {
        let preds = infer_with_index(&model, v, &index, ModalityMask::default()).unwrap();
        n_gt += v.moments.len();
        n_pred += preds.len();
        let mut taken = vec![false; v.moments.len()];
        let mut matched_rank: Vec<Option<usize>> = Vec::new();
        for p in &preds {
            let pi = Interval::new(p.start as f64, p.end as f64).unwrap();
            let mut best: Option<(usize, f64)> = None;
            for (gi, m) in v.moments.iter().enumerate() {
                if taken[gi] { continue; }
                let iou = temporal_iou(pi, Interval::new(m.start as f64, m.end as f64).unwrap());
                if iou >= 0.5 && p.sfx_id == m.sfx_id && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, _)) = best { taken[gi] = true; tp += 1; matched_rank.push(Some(gi)); }
            else { matched_rank.push(None); }
        }
        // classify each unmatched GT
        for (gi, m) in v.moments.iter().enumerate() {
            if taken[gi] { continue; }
            let gt_iv = Interval::new(m.start as f64, m.end as f64).unwrap();
            // any pred overlapping well but wrong sfx?
            let overlap_wrong = preds.iter().any(|p| {
                let pi = Interval::new(p.start as f64, p.end as f64).unwrap();
                temporal_iou(pi, gt_iv) >= 0.5 && p.sfx_id != m.sfx_id
            });
            let overlap_loc = preds.iter().any(|p| {
                let pi = Interval::new(p.start as f64, p.end as f64).unwrap();
                let iou = temporal_iou(pi, gt_iv);
                iou > 0.1 && iou < 0.5
            });
            if overlap_wrong { wrong_sfx += 1; }
            else if overlap_loc { bad_loc += 1; }
            else { miss_sfx0 += 1; }
        }
        // junk preds ranked above the first TP
        if let Some(first_tp) = matched_rank.iter().position(|r| r.is_some()) {
            junk_above += first_tp;
        }
        all.extend(preds);
    }
    let refs: Vec<_> = ds.videos.iter().collect();
    let rep = evaluate(&all, &refs, &[0.5]).unwrap();
    println!("GT {n_gt} preds {n_pred} TP {tp}");
    println!("unmatched GT: wrong-sfx {wrong_sfx}, bad-localization {bad_loc}, no-overlap/suppressed {miss_sfx0}");
    println!("junk preds ranked above first TP (sum) {junk_above}");
    println!("mAP_vid@0.5 {:.4} mAP_sfx@0.5 {:.4}", rep.rows[0].map_vid, rep.rows[0].map_sfx);

    // confidence stats of TP vs FP
    let mut tp_conf = Vec::new();
    let mut fp_conf = Vec::new();
    for v in ds.videos.iter() {
        let preds = infer_with_index(&model, v, &index, ModalityMask::default()).unwrap();
        let mut taken = vec![false; v.moments.len()];
        for p in &preds {
            let pi = Interval::new(p.start as f64, p.end as f64).unwrap();
            let mut hit = false;
            for (gi, m) in v.moments.iter().enumerate() {
                if taken[gi] { continue; }
                let iou = temporal_iou(pi, Interval::new(m.start as f64, m.end as f64).unwrap());
                if iou >= 0.5 && p.sfx_id == m.sfx_id { taken[gi] = true; hit = true; break; }
            }
            if hit { tp_conf.push(p.confidence) } else { fp_conf.push(p.confidence) }
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    println!("TP conf mean {:.3} (n={}), FP conf mean {:.3} (n={})", mean(&tp_conf), tp_conf.len(), mean(&fp_conf), fp_conf.len());
}

fn missed_moment_autopsy() {
    use dm_core::model::video_encoder::embed_video;
    use dm_core::model::decoder::decode_moments;
    use dm_core::matching::{build_similarity_matrix, select_best_sfx, nms};
    use dm_core::tensor::{Tape, Dropout};

    let root = std::path::Path::new("/tmp/c4state");
    let ds = load_dataset(&root.join("data/manifest.json")).unwrap();
    let model = DmModel::load(&root.join("trained.dmck")).unwrap();
    let index = embed_sfx_index(&model, &ds.sfx, ModalityMask::default()).unwrap();

    let (mut miss, mut covered_by_s0, mut covered_nms, mut uncovered) = (0, 0, 0, 0);
    for v in ds.videos.iter() {
        let preds = infer_with_index(&model, v, &index, ModalityMask::default()).unwrap();
        let mut taken = vec![false; v.moments.len()];
        for p in &preds {
            let pi = Interval::new(p.start as f64, p.end as f64).unwrap();
            for (gi, m) in v.moments.iter().enumerate() {
                if taken[gi] { continue; }
                let iou = temporal_iou(pi, Interval::new(m.start as f64, m.end as f64).unwrap());
                if iou >= 0.5 && p.sfx_id == m.sfx_id { taken[gi] = true; break; }
            }
        }
        if taken.iter().all(|&t| t) { continue; }

        let mut tape = Tape::<f32>::new();
        let enc = embed_video(&mut tape, &model.store, &model.cfg, v, ModalityMask::default(), &mut Dropout::off()).unwrap();
        let dec = decode_moments(&mut tape, &model.store, &model.cfg, enc.tokens, &mut Dropout::off()).unwrap();
        let spans = dec.span_values(&tape);
        let embs: Vec<f64> = tape.value(dec.embeddings).iter().map(|&x| x as f64).collect();
        let m = build_similarity_matrix(&index.values, &embs, model.cfg.d_model).unwrap();
        let best = select_best_sfx(&m, model.cfg.conf_temperature);
        let cands: Vec<(Interval, f64)> = spans.iter().zip(&best)
            .map(|(&(s, e), b)| (Interval::new(s, e).unwrap(), b.confidence)).collect();
        let kept = nms(&cands, model.cfg.nms_iou);

        let nf = v.n as f64;
        for (gi, mm) in v.moments.iter().enumerate() {
            if taken[gi] { continue; }
            miss += 1;
            let gt = Interval::new(mm.start as f64 / nf, mm.end as f64 / nf).unwrap();
            // which queries overlap this GT at >= 0.5 in normalized space
            let mut found = false;
            for (q, &(s, e)) in spans.iter().enumerate() {
                let qi = Interval::new(s, e).unwrap();
                if temporal_iou(qi, gt) >= 0.5 {
                    found = true;
                    if best[q].row == 0 { covered_by_s0 += 1; }
                    else if !kept.contains(&q) { covered_nms += 1; }
                    break;
                }
            }
            if !found { uncovered += 1; }
        }
    }
    println!("missed {miss}: query-covered-but-s0 {covered_by_s0}, query-covered-but-NMS {covered_nms}, no-query-covers {uncovered}");
}

