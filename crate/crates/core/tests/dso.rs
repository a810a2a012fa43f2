use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sound2img_core::backends::{Generator, MockSuite, SamplerSettings, Scorer};
use sound2img_core::dso::{evaluate, run_dso, DsoConfig, DsoContext};
use sound2img_core::{AudioClip, LatentConditioning, TensorBuffer, TokenWeights};

struct Instance {
    z: LatentConditioning,
    w: TokenWeights,
    clip: AudioClip,
    caption: String,
}

fn suite() -> MockSuite {
    MockSuite {
        token_count: 16,
        image_size: 16,
        scorer_resolution: 8,
        ..MockSuite::default()
    }
}

fn instance(seed: u64, s: &MockSuite) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, c) = (s.token_count, s.channel_dim);
    let z: Vec<f32> = (0..t * c).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let z = LatentConditioning::new(TensorBuffer::new(vec![t, c], z).unwrap()).unwrap();
    let mut w = TokenWeights::neutral(t);
    let span = rng.gen_range(3..t - 2);
    for i in 1..=span {
        w.caption_mask[i] = true;
        w.noun_mask[i] = rng.gen_bool(0.4);
        w.weights[i] = rng.gen_range(0.5..1.8);
    }
    w.caption_token_count = span;
    let rate = 8000;
    let freq = rng.gen_range(0.01f32..0.2);
    let amp = rng.gen_range(0.05f32..0.9);
    let samples = (0..rate).map(|i| amp * (i as f32 * freq).sin()).collect();
    let words = [
        "a dog barks",
        "rain falls softly",
        "an engine revs loudly",
        "birds chirp",
    ];
    Instance {
        z,
        w,
        clip: AudioClip::new(samples, rate as u32).unwrap(),
        caption: words[rng.gen_range(0..words.len())].to_string(),
    }
}

fn ctx<'a>(
    inst: &'a Instance,
    g: &'a dyn Generator,
    sc: &'a dyn Scorer,
    sampler: &'a SamplerSettings,
) -> DsoContext<'a> {
    DsoContext {
        generator: g,
        scorer: sc,
        sampler,
        audio: &inst.clip,
        caption_text: &inst.caption,
        generator_seed: 11,
        augment_seed: 12,
    }
}

#[test]
fn descends_on_every_seed() {
    let s = suite();
    let (g, sc, sampler) = (s.generator(), s.scorer(), SamplerSettings::default());
    let cfg = DsoConfig::default();
    for seed in 0..100 {
        let inst = instance(seed, &s);
        let c = ctx(&inst, &g, &sc, &sampler);
        let out = run_dso(&inst.z, &inst.w, &c, &cfg).unwrap();
        assert_eq!(out.trace.len(), 10);
        let end = evaluate(&inst.z, &out.weights.weights, &c, &cfg, cfg.steps, false).unwrap();
        assert!(
            end.loss.l_total < out.trace[0].l_total,
            "seed {seed}: {} -> {}",
            out.trace[0].l_total,
            end.loss.l_total
        );
    }
}

#[test]
fn zero_learning_rates_freeze_weights() {
    let s = suite();
    let (g, sc, sampler) = (s.generator(), s.scorer(), SamplerSettings::default());
    let cfg = DsoConfig {
        lr_noun: 0.0,
        lr_non_noun: 0.0,
        ..DsoConfig::default()
    };
    let inst = instance(3, &s);
    let out = run_dso(&inst.z, &inst.w, &ctx(&inst, &g, &sc, &sampler), &cfg).unwrap();
    let before: Vec<u64> = inst.w.weights.iter().map(|v| v.to_bits()).collect();
    let after: Vec<u64> = out.weights.weights.iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after);
}

#[test]
fn neutral_tokens_untouched_and_nouns_move_faster() {
    let s = suite();
    let (g, sc, sampler) = (s.generator(), s.scorer(), SamplerSettings::default());
    let cfg = DsoConfig::default();
    // Per-step Adam displacement bound when (1 - β1) > sqrt(1 - β2).
    let bound = (1.0 - cfg.adam_beta1) / (1.0 - cfg.adam_beta2).sqrt() * cfg.steps as f64;
    let mut noun_total = 0.0;
    let mut other_total = 0.0;
    for seed in 0..20 {
        let inst = instance(seed, &s);
        let out = run_dso(&inst.z, &inst.w, &ctx(&inst, &g, &sc, &sampler), &cfg).unwrap();
        out.weights.validate().unwrap();
        for i in 0..inst.w.len() {
            let d = (out.weights.weights[i] - inst.w.weights[i]).abs();
            if !inst.w.caption_mask[i] {
                assert_eq!(out.weights.weights[i], 1.0);
            } else if inst.w.noun_mask[i] {
                noun_total += d;
                assert!(d <= bound * cfg.lr_noun);
            } else {
                other_total += d;
                assert!(d <= bound * cfg.lr_non_noun, "seed {seed} token {i}: {d}");
            }
        }
        assert_eq!(out.weights.noun_mask, inst.w.noun_mask);
    }
    let nouns = (0..20)
        .map(|s| {
            instance(s, &suite())
                .w
                .noun_mask
                .iter()
                .filter(|&&n| n)
                .count()
        })
        .sum::<usize>();
    let others = (0..20)
        .map(|s| {
            let w = instance(s, &suite()).w;
            (0..w.len())
                .filter(|&i| w.caption_mask[i] && !w.noun_mask[i])
                .count()
        })
        .sum::<usize>();
    assert!(noun_total / nouns as f64 > other_total / others as f64);
}

#[test]
fn l2_only_objective_decreases_monotonically() {
    let s = suite();
    let (g, sc, sampler) = (s.generator(), s.scorer(), SamplerSettings::default());
    let cfg = DsoConfig {
        weight_audio: 0.0,
        weight_clip: 0.0,
        weight_l2: 1.0,
        ..DsoConfig::default()
    };
    let mut inst = instance(5, &s);
    for i in 0..inst.w.len() {
        if inst.w.caption_mask[i] {
            inst.w.weights[i] = 1.5;
        }
    }
    let out = run_dso(&inst.z, &inst.w, &ctx(&inst, &g, &sc, &sampler), &cfg).unwrap();
    for pair in out.trace.windows(2) {
        assert!(pair[1].l_total <= pair[0].l_total);
    }
}

#[test]
fn zero_steps_returns_initial_modulation() {
    let s = suite();
    let (g, sc, sampler) = (s.generator(), s.scorer(), SamplerSettings::default());
    let cfg = DsoConfig {
        steps: 0,
        ..DsoConfig::default()
    };
    let inst = instance(9, &s);
    let out = run_dso(&inst.z, &inst.w, &ctx(&inst, &g, &sc, &sampler), &cfg).unwrap();
    assert!(out.trace.is_empty());
    assert_eq!(out.weights, inst.w);
    assert_eq!(
        out.z_final,
        sound2img_core::fusion::modulate(&inst.z, &inst.w).unwrap()
    );
}
