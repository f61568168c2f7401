use super::*;
use crate::diffusion::NoiseKind;
use crate::schedule::{make_schedule, ScheduleKind};
use crate::tokenizer::SpecialIds;

const SPECIALS: SpecialIds = SpecialIds {
    pad: 0,
    bos: 1,
    eos: 2,
    mask: 3,
};

fn pair(src: usize, tgt: usize) -> EncodedPair {
    EncodedPair {
        source: (0..src).map(|i| 6 + (i % 5) as u32).collect(),
        target: (0..tgt).map(|i| 11 + (i % 4) as u32).collect(),
        source_lang: 0,
        target_lang: 1,
    }
}

fn absorbing() -> NoiseKind {
    NoiseKind::Absorbing { mask_id: 3 }
}

#[test]
fn selection_count_rounds_down_with_floor_one() {
    assert_eq!(selection_count(20, 0.15), 3);
    assert_eq!(selection_count(6, 0.15), 1);
    assert_eq!(selection_count(1, 0.15), 1);
    assert_eq!(selection_count(0, 0.15), 0);
    assert_eq!(selection_count(100, 0.15), 15);
    assert_eq!(selection_count(40, 0.15), 6);
}

#[test]
fn tdlm_layout_and_selection() {
    let sched = make_schedule(ScheduleKind::LinearMask, 20).unwrap();
    let cfg = TrainConfig::toy();
    let b = make_tdlm_batch(&[pair(12, 8)], SPECIALS, &sched, &absorbing(), &cfg, 3).unwrap();
    assert_eq!(b.len(), 1);
    let clean = &b.clean[0];
    assert_eq!(clean.len(), 21);
    assert_eq!(clean[12], SPECIALS.eos);
    // 20 real tokens around the separator.
    assert_eq!(b.selected[0].iter().filter(|&&s| s).count(), 3);
    assert!(!b.selected[0][12]);
    assert_eq!(&b.positions[0][..13], &(0..13).collect::<Vec<u32>>()[..]);
    assert_eq!(&b.positions[0][13..], &(0..8).collect::<Vec<u32>>()[..]);
    assert!(b.langs[0][..13].iter().all(|&l| l == 0));
    assert!(b.langs[0][13..].iter().all(|&l| l == 1));
    for i in 0..clean.len() {
        if !b.selected[0][i] {
            assert_eq!(b.ids[0][i], clean[i], "unselected position {i} changed");
        }
    }
    assert_eq!(b.loss_positions, b.selected);
    assert!((1..=20).contains(&b.timesteps[0]));
}

#[test]
fn tdlm_full_sequence_loss_switch() {
    let sched = make_schedule(ScheduleKind::LinearMask, 20).unwrap();
    let cfg = TrainConfig {
        full_sequence_loss: true,
        ..TrainConfig::toy()
    };
    let b = make_tdlm_batch(&[pair(4, 4)], SPECIALS, &sched, &absorbing(), &cfg, 3).unwrap();
    let on: Vec<bool> = b.clean[0].iter().map(|&id| id != SPECIALS.eos).collect();
    assert_eq!(b.loss_positions[0], on);
}

#[test]
fn tdlm_skips_pairs_without_eligible_tokens() {
    let sched = make_schedule(ScheduleKind::LinearMask, 20).unwrap();
    let only_specials = EncodedPair {
        source: vec![1],
        target: vec![2],
        source_lang: 0,
        target_lang: 1,
    };
    let b = make_tdlm_batch(&[only_specials, pair(3, 3)], SPECIALS, &sched, &absorbing(), &TrainConfig::toy(), 1)
        .unwrap();
    assert_eq!(b.n_skipped, 1);
    assert_eq!(b.len(), 1);
}

#[test]
fn batches_are_bit_deterministic() {
    let sched = make_schedule(ScheduleKind::Cosine, 20).unwrap();
    let pairs = vec![pair(5, 7), pair(9, 3), pair(2, 2)];
    let cfg = TrainConfig::toy();
    let a = make_tdlm_batch(&pairs, SPECIALS, &sched, &absorbing(), &cfg, 99).unwrap();
    let b = make_tdlm_batch(&pairs, SPECIALS, &sched, &absorbing(), &cfg, 99).unwrap();
    assert_eq!(a, b);
    let c = make_tdlm_batch(&pairs, SPECIALS, &sched, &absorbing(), &cfg, 100).unwrap();
    assert_ne!(a, c);
    let f1 = make_finetune_batch(&pairs, &sched, &absorbing(), &cfg, 5).unwrap();
    let f2 = make_finetune_batch(&pairs, &sched, &absorbing(), &cfg, 5).unwrap();
    assert_eq!(f1, f2);
}

#[test]
fn tdlm_selection_is_uniform_over_eligible_positions() {
    let sched = make_schedule(ScheduleKind::LinearMask, 20).unwrap();
    let cfg = TrainConfig::toy();
    let p = pair(12, 8);
    let n = 10_000;
    let mut counts = vec![0usize; 21];
    for seed in 0..n {
        let b = make_tdlm_batch(std::slice::from_ref(&p), SPECIALS, &sched, &absorbing(), &cfg, seed).unwrap();
        for (i, &s) in b.selected[0].iter().enumerate() {
            counts[i] += usize::from(s);
        }
    }
    assert_eq!(counts[12], 0);
    let prob = 3.0 / 20.0;
    let mean = n as f64 * prob;
    let sigma = (n as f64 * prob * (1.0 - prob)).sqrt();
    for (i, &c) in counts.iter().enumerate().filter(|(i, _)| *i != 12) {
        assert!((c as f64 - mean).abs() < 3.0 * sigma, "position {i}: {c} vs {mean}");
    }
}

#[test]
fn finetune_at_t_max_is_all_mask() {
    let sched = make_schedule(ScheduleKind::LinearMask, 1).unwrap();
    let b = make_finetune_batch(&[pair(4, 6)], &sched, &absorbing(), &TrainConfig::toy(), 0).unwrap();
    assert_eq!(b.timesteps[0], 1);
    assert!(b.decoder[0].ids.iter().all(|&id| id == 3));
    assert!(b.loss_positions[0].iter().all(|&x| x));
    assert_eq!(b.true_lengths[0], 6);
    assert_eq!(b.encoder[0].ids, pair(4, 6).source);
}

#[test]
fn finetune_noised_fraction_matches_schedule() {
    let sched = make_schedule(ScheduleKind::Cosine, 20).unwrap();
    let cfg = TrainConfig::toy();
    let pairs: Vec<EncodedPair> = (0..8).map(|_| pair(5, 10)).collect();
    let mut noised = 0usize;
    let mut total = 0usize;
    let mut seen_t = [false; 21];
    for seed in 0..2_000 {
        let b = make_finetune_batch(&pairs, &sched, &absorbing(), &cfg, seed).unwrap();
        for (lp, &t) in b.loss_positions.iter().zip(&b.timesteps) {
            seen_t[t] = true;
            noised += lp.iter().filter(|&&x| x).count();
            total += lp.len();
        }
    }
    assert!(!seen_t[0]);
    assert!(seen_t[1..].iter().all(|&s| s));
    let expect: f64 = (1..=20).map(|t| 1.0 - sched.alpha_bar(t)).sum::<f64>() / 20.0;
    // Per position: Var = E[p(1-p)] + Var(p) over the uniform t, which equals expect * (1 - expect).
    let sigma = (expect * (1.0 - expect) / total as f64).sqrt();
    let got = noised as f64 / total as f64;
    // Positions in a row share t, so inflate by the row length.
    assert!((got - expect).abs() < 3.0 * sigma * (10f64).sqrt(), "{got} vs {expect}");
}

#[test]
fn finetune_multinomial_loss_positions_are_changed_tokens() {
    let sched = make_schedule(ScheduleKind::LinearMask, 20).unwrap();
    let noise = NoiseKind::multinomial_over((6..15).collect()).unwrap();
    let b = make_finetune_batch(&[pair(6, 12)], &sched, &noise, &TrainConfig::toy(), 11).unwrap();
    for i in 0..12 {
        assert_eq!(b.loss_positions[0][i], b.decoder[0].ids[i] != b.targets[0][i]);
    }
}

#[test]
fn batcher_respects_budget_and_covers_epoch() {
    let pairs: Vec<EncodedPair> = (0..200).map(|i| pair(1 + i % 13, 1 + (i * 7) % 11)).collect();
    let mut b = TokenBatcher::new(&pairs, 64, 0, 4).unwrap();
    let mut seen = vec![0usize; pairs.len()];
    while b.epoch() == 0 {
        let idx = b.next_batch();
        if b.epoch() != 0 {
            break;
        }
        let ms = idx.iter().map(|&i| pairs[i].source.len()).max().unwrap();
        let mt = idx.iter().map(|&i| pairs[i].target.len()).max().unwrap();
        assert!(idx.len() == 1 || idx.len() * (ms + mt) <= 64);
        idx.iter().for_each(|&i| seen[i] += 1);
    }
    assert!(seen.iter().all(|&c| c == 1));
}
