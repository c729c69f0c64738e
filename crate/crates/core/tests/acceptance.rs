//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when an asserted criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 7`.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tcda::dag::{build_tc_dag, validate_dag, Relation};
use tcda::dialogue::{build_token_index, decompose_threads, Dialogue, Span, TokenKind, TokenLayout};
use tcda::drope::{decay_curve, drope_parts, drope_score, format_decay_table, rotary_rotate, TokenCoord, THETA_MAC, THETA_MIC};
use tcda::grid::{decode_quadruples, encode_grids, Quadruple, Sentiment};
use tcda::pipeline::model::{gradient_fixture, prepare_all, Example};
use tcda::pipeline::{evaluate_model, gen_synthetic, run_ablation, Model, PipelineConfig, SyntheticSpec, Trainer, Variant, Vocab};

struct Outcome {
    pass: bool,
    /// `false` when the result is reported but not enforced.
    enforced: bool,
    detail: String,
}

impl Outcome {
    fn check(pass: bool, detail: String) -> Self {
        Outcome { pass, enforced: true, detail }
    }
}

fn random_dialogue(rng: &mut ChaCha8Rng, n: usize, speakers: usize, max_tokens: usize) -> Dialogue {
    let names: Vec<String> = (0..speakers).map(|s| format!("S{s}")).collect();
    let spk: Vec<&str> = (0..n).map(|_| names[rng.gen_range(0..speakers)].as_str()).collect();
    let replies: Vec<Option<usize>> = (1..=n).map(|i| (i > 1).then(|| rng.gen_range(1..i))).collect();
    let tokens: Vec<Vec<&str>> = (0..n).map(|_| vec!["w"; rng.gen_range(1..=max_tokens)]).collect();
    Dialogue::from_parts("r", &spk, &replies, &tokens).unwrap()
}

/// The edge-building walk written out directly over raw reply links.
fn reference_edges(d: &Dialogue, window: usize) -> BTreeSet<(usize, usize, Relation)> {
    let n = d.len();
    let parent = |i: usize| d.utterance(i).reply_to;
    let branch = |mut i: usize| -> usize {
        while let Some(p) = parent(i) {
            if p == 1 {
                return i;
            }
            i = p;
        }
        1
    };
    let first_branch = (2..=n).map(branch).min();
    let speaker = |i: usize| d.utterance(i).speaker.clone();
    let mut edges = BTreeSet::new();
    for i in 2..=n {
        let b = branch(i);
        let start = if Some(b) == first_branch { 1 } else { b };
        let same_thread = |t: usize| t == 1 || branch(t) == b;
        let mut c = 0;
        let mut tau = i - 1;
        while tau >= start && c < window {
            if same_thread(tau) {
                let r = if speaker(tau) == speaker(i) { Relation::SameSpeaker } else { Relation::OtherSpeaker };
                edges.insert((tau, i, r));
                if r == Relation::SameSpeaker {
                    c += 1;
                }
            }
            tau -= 1;
        }
        if c < window && start > 1 {
            let r = if speaker(1) == speaker(i) { Relation::SameSpeaker } else { Relation::OtherSpeaker };
            edges.insert((1, i, r));
        }
    }
    edges
}

fn c1_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = 0;
    let mut edges = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=30);
        let speakers = rng.gen_range(1..=5);
        let d = random_dialogue(&mut rng, n, speakers, 1);
        let w = rng.gen_range(1..=4);
        let g = build_tc_dag(&d, &decompose_threads(&d), w).unwrap();
        let got: BTreeSet<_> = g.edges().iter().map(|e| (e.source, e.target, e.relation)).collect();
        edges += got.len();
        if got.len() != g.edges().len() || got != reference_edges(&d, w) {
            mismatches += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome::check(mismatches == 0 && secs < 30.0, format!("TC-DAG vs brute-force edge walk: 1000 dialogues, {edges} edges, {mismatches} mismatches, {secs:.2}s"))
}

fn c2_structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=30);
        let speakers = rng.gen_range(1..=5);
        let d = random_dialogue(&mut rng, n, speakers, 1);
        let w = rng.gen_range(1..=4);
        let td = decompose_threads(&d);
        let g = build_tc_dag(&d, &td, w).unwrap();
        violations += validate_dag(&g, &d, &td).violations.len();
        for e in g.edges() {
            violations += usize::from(e.source >= e.target);
        }
        for i in 2..=n {
            let same = g.predecessors(i).iter().filter(|(s, r)| *s != 1 && *r == Relation::SameSpeaker).count();
            violations += usize::from(same > w);
            violations += usize::from(g.predecessors(i).is_empty());
        }
    }
    let d = Dialogue::from_parts(
        "fig3",
        &["A", "B", "A", "C", "B", "D", "C"],
        &[None, Some(1), Some(2), Some(1), Some(4), Some(1), Some(6)],
        &vec![vec!["x"]; 7],
    )
    .unwrap();
    let g = build_tc_dag(&d, &decompose_threads(&d), 1).unwrap();
    let anchored = [4, 6].iter().filter(|&&i| g.predecessors(i).iter().any(|(s, _)| *s == 1)).count();
    violations += 2 - anchored;
    Outcome::check(violations == 0, format!("DAG structure over 1000 random dialogues plus divergent-thread anchoring (w=1): {violations} violations"))
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn c3_rotary() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut identity_exact = true;
    let mut norm_err: f64 = 0.0;
    let mut shift_err: f64 = 0.0;
    for _ in 0..10_000 {
        let w = 2 * rng.gen_range(1..=16);
        let x = rand_vec(&mut rng, w);
        let base = if rng.gen_bool(0.5) { THETA_MIC } else { THETA_MAC };
        identity_exact &= rotary_rotate(&x, 0.0, base).unwrap() == x;
        let p = rng.gen_range(-500.0..500.0);
        norm_err = norm_err.max((norm(&rotary_rotate(&x, p, base).unwrap()) - norm(&x)).abs());
    }
    for _ in 0..1000 {
        let h = 2 * rng.gen_range(1..=8);
        let (qm, qa, km, ka) = (rand_vec(&mut rng, h), rand_vec(&mut rng, h), rand_vec(&mut rng, h), rand_vec(&mut rng, h));
        let c = |t: f64, u: f64| TokenCoord { p_tok: t, p_utt: u };
        let (ti, tj, ui, uj) = (rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0), rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
        let (st, su) = (rng.gen_range(-100.0..100.0), rng.gen_range(-5.0..5.0));
        let a = drope_score(&qm, &qa, &km, &ka, c(ti, ui), c(tj, uj), true, THETA_MIC, THETA_MAC).unwrap();
        let b = drope_score(&qm, &qa, &km, &ka, c(ti + st, ui + su), c(tj + st, uj + su), true, THETA_MIC, THETA_MAC).unwrap();
        shift_err = shift_err.max((a - b).abs());
    }
    Outcome::check(
        identity_exact && norm_err <= 1e-9 && shift_err <= 1e-9,
        format!("rotary identities: R(x,0)=x exact {identity_exact}, max norm drift {norm_err:.1e}, max shift drift {shift_err:.1e}"),
    )
}

fn c4_sign_inversion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut err: f64 = 0.0;
    for _ in 0..1000 {
        let h = 2 * rng.gen_range(1..=8);
        let (qm, qa, km, ka) = (rand_vec(&mut rng, h), rand_vec(&mut rng, h), rand_vec(&mut rng, h), rand_vec(&mut rng, h));
        let (ti, tj) = (rng.gen_range(0..300) as f64, rng.gen_range(0..300) as f64);
        let (ui, uj) = (rng.gen_range(0..12) as f64, rng.gen_range(0..12) as f64);
        let div = drope_parts(&qm, &qa, &km, &ka, TokenCoord { p_tok: ti, p_utt: ui }, TokenCoord { p_tok: tj, p_utt: uj }, false, THETA_MIC, THETA_MAC).unwrap();
        let same = drope_parts(
            &qm,
            &qa,
            &km,
            &ka,
            TokenCoord { p_tok: ti + tj, p_utt: ui + uj },
            TokenCoord { p_tok: 0.0, p_utt: 0.0 },
            true,
            THETA_MIC,
            THETA_MAC,
        )
        .unwrap();
        err = err.max((div.0 - same.0).abs()).max((div.1 - same.1).abs());
    }
    Outcome::check(err <= 1e-9, format!("divergent pair equals same-thread distance p_i + p_j per subspace over 1000 draws: max error {err:.1e}"))
}

/// Query: first token of the last utterance of a chain; key: first token of
/// the root. Intermediate utterances get `scale` times their base length.
fn chain_coords(scale: usize) -> (TokenCoord, TokenCoord) {
    let lens = [3, 5, 2, 4, 6, 3];
    let tokens: Vec<Vec<&str>> = lens.iter().enumerate().map(|(i, &l)| vec!["w"; if i == 0 || i == lens.len() - 1 { l } else { l * scale }]).collect();
    let n = lens.len();
    let replies: Vec<Option<usize>> = (1..=n).map(|i| (i > 1).then_some(i - 1)).collect();
    let d = Dialogue::from_parts("chain", &["A", "B", "A", "B", "A", "B"], &replies, &tokens).unwrap();
    let map = build_token_index(&d, &decompose_threads(&d), TokenLayout::Wrapped);
    let first = |u: usize| {
        let p = map.tokens().iter().find(|p| p.utterance == u && matches!(p.kind, TokenKind::Content(_))).unwrap();
        TokenCoord { p_tok: p.p_tok as f64, p_utt: p.p_utt as f64 }
    };
    (first(n), first(1))
}

fn c5_dilution() -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (qm, qa, km, ka) = (rand_vec(&mut rng, 16), rand_vec(&mut rng, 16), rand_vec(&mut rng, 16), rand_vec(&mut rng, 16));
    let parts = |s: usize| {
        let (qi, kj) = chain_coords(s);
        let (mic, mac) = drope_parts(&qm, &qa, &km, &ka, qi, kj, true, THETA_MIC, THETA_MAC).unwrap();
        let total = drope_score(&qm, &qa, &km, &ka, qi, kj, true, THETA_MIC, THETA_MAC).unwrap();
        (qi, mic, mac, total)
    };
    let (q1, mic1, mac1, tot1) = parts(1);
    let mut macro_changed = 0;
    let mut residual: f64 = 0.0;
    let mut token_span = 0.0;
    for s in [2, 5, 10, 25, 50, 100] {
        let (q, mic, mac, tot) = parts(s);
        macro_changed += usize::from(mac.to_bits() != mac1.to_bits() || q.p_utt != q1.p_utt);
        residual = residual.max(((tot - tot1) - (mic - mic1)).abs());
        token_span = q.p_tok;
    }
    let first = Outcome::check(
        macro_changed == 0 && residual <= 1e-9,
        format!("dilution: inflating intermediate tokens up to 100x (query p_tok {} -> {token_span}) leaves the macro term bit-identical; total minus micro variation {residual:.1e}", q1.p_tok),
    );
    let rows = decay_curve(THETA_MIC, THETA_MAC, 32, 5, 5000, 7).unwrap();
    let (mic5, mac5) = (rows[5].micro, rows[5].macro_);
    let second = Outcome {
        pass: mac5 >= mic5,
        enforced: false,
        detail: format!(
            "dilution: macro correlation at p_utt-distance 5 = {mac5:.4} vs micro at token-distance 5 = {mic5:.4} (width 32, not enforced, see decay table)\n{}",
            format_decay_table(&rows).lines().map(|l| format!("    {l}")).collect::<Vec<_>>().join("\n")
        ),
    };
    vec![first, second]
}

fn c6_gradients() -> Outcome {
    let t0 = Instant::now();
    let cfg = PipelineConfig { d: 8, head_width: 8, ..PipelineConfig::default() };
    let rec = gradient_fixture();
    let vocab = Vocab::build([&rec.dialogue]);
    let mut model = Model::new(&cfg, vocab.clone()).unwrap();
    let ex = Example::prepare(rec, &vocab, &cfg, None).unwrap();
    let r = model.grad_check(&ex, None).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    Outcome::check(
        r.max_rel_error <= 1e-4 && secs < 120.0,
        format!(
            "end-to-end gradient check (d=8, all {} parameter entries): max relative error {:.2e} at {}[{}], {secs:.1}s",
            r.checked, r.max_rel_error, r.worst_param, r.worst_index
        ),
    )
}

/// Random quadruple sets whose spans are disjoint, whose roles are unique per
/// span, whose (target, opinion) polarity is unique and whose pair links
/// close no triangle beyond the planted quadruples.
fn conflict_free_set(rng: &mut ChaCha8Rng) -> (Dialogue, Vec<Quadruple>) {
    loop {
        let n = rng.gen_range(1..=5);
        let d = random_dialogue(rng, n, 3, 8);
        let mut spans = Vec::new();
        for u in d.utterances() {
            let base = d.content_offsets()[u.id - 1];
            let mut i = 0;
            while i < u.tokens.len() {
                let len = rng.gen_range(1..=2).min(u.tokens.len() - i);
                if rng.gen_bool(0.6) {
                    spans.push(Span::new(base + i, base + i + len - 1));
                }
                i += len;
            }
        }
        spans.shuffle(rng);
        if spans.len() < 3 {
            continue;
        }
        let roles: Vec<usize> = (0..spans.len()).map(|i| if i < 3 { i } else { rng.gen_range(0..3) }).collect();
        let of = |r: usize| -> Vec<Span> { spans.iter().zip(&roles).filter(|(_, &x)| x == r).map(|(s, _)| *s).collect() };
        let (ts, as_, os) = (of(0), of(1), of(2));
        let k = rng.gen_range(1..=4);
        let mut quads: Vec<Quadruple> = (0..k)
            .map(|_| Quadruple {
                target: *ts.choose(rng).unwrap(),
                aspect: *as_.choose(rng).unwrap(),
                opinion: *os.choose(rng).unwrap(),
                sentiment: *[Sentiment::Pos, Sentiment::Neg, Sentiment::Neu].choose(rng).unwrap(),
            })
            .collect();
        quads.sort();
        quads.dedup_by(|a, b| (a.target, a.aspect, a.opinion) == (b.target, b.aspect, b.opinion));
        let pol: BTreeSet<(Span, Span)> = quads.iter().map(|q| (q.target, q.opinion)).collect();
        let pol_sent: BTreeSet<(Span, Span, Sentiment)> = quads.iter().map(|q| (q.target, q.opinion, q.sentiment)).collect();
        if pol.len() != pol_sent.len() {
            continue;
        }
        let ta: BTreeSet<_> = quads.iter().map(|q| (q.target, q.aspect)).collect();
        let to: BTreeSet<_> = quads.iter().map(|q| (q.target, q.opinion)).collect();
        let ao: BTreeSet<_> = quads.iter().map(|q| (q.aspect, q.opinion)).collect();
        let mut triangles = 0;
        for &(t, a) in &ta {
            for &(a2, o) in &ao {
                if a2 == a && to.contains(&(t, o)) {
                    triangles += 1;
                }
            }
        }
        if triangles == quads.len() {
            return (d, quads);
        }
    }
}

fn c7_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut exact = 0;
    let mut quads_total = 0;
    for _ in 0..500 {
        let (d, quads) = conflict_free_set(&mut rng);
        let map = build_token_index(&d, &decompose_threads(&d), TokenLayout::Wrapped);
        let grids = encode_grids(&map, &quads).unwrap();
        let (back, _) = decode_quadruples(&map, &grids);
        quads_total += quads.len();
        exact += usize::from(back == quads);
    }
    Outcome::check(exact == 500, format!("grid round trip: {exact}/500 conflict-free sets exact ({quads_total} quadruples)"))
}

fn c8_overfit() -> Outcome {
    let t0 = Instant::now();
    let mut results = Vec::new();
    for seed in 1..=5u64 {
        let records = gen_synthetic(&SyntheticSpec { dialogues: 20, seed, ..SyntheticSpec::default() }).unwrap();
        let cfg = PipelineConfig {
            d: 64,
            head_width: 64,
            seed,
            lr_encoder: 1e-3,
            lr_rest: 1e-3,
            dropout: 0.0,
            epochs: 300,
            patience: 300,
            target_f1: Some(0.95),
            ..PipelineConfig::default()
        };
        let vocab = Vocab::build(records.iter().map(|r| &r.dialogue));
        let ex = prepare_all(&records, &vocab, &cfg, None).unwrap();
        let mut t = Trainer::new(Model::new(&cfg, vocab).unwrap(), &ex, &ex).unwrap();
        let report = t.fit(|_| ()).unwrap();
        let (m, _) = evaluate_model(&t.model, &ex).unwrap();
        results.push((seed, m.micro.f1, report.history.len()));
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = results.iter().filter(|r| r.1 >= 0.95).count();
    let runs: Vec<String> = results.iter().map(|(s, f, e)| format!("seed {s}: {f:.3} @ {e} ep")).collect();
    Outcome::check(ok == 5 && secs < 600.0, format!("overfit 20 synthetic dialogues at d=64: {ok}/5 seeds reach training micro F1 >= 0.95 ({}), {secs:.0}s", runs.join(", ")))
}

fn ablation_config() -> PipelineConfig {
    PipelineConfig { d: 32, head_width: 32, encoder_layers: 1, lr_encoder: 1e-3, lr_rest: 1e-3, epochs: 40, patience: 40, ..PipelineConfig::default() }
}

fn c9_ablation() -> Outcome {
    let t0 = Instant::now();
    let mut records = gen_synthetic(&SyntheticSpec::stress(200, 7)).unwrap();
    let dev = records.split_off(160);
    let seeds = [1, 2, 3, 4, 5];
    let table = run_ablation(&ablation_config(), &records, &dev, &Variant::COMPONENTS, &seeds, None, |_| ()).unwrap();
    let micro = |v| table.mean(v).unwrap().micro;
    let (full, no_dag, no_rope, no_both) = (micro(Variant::Full), micro(Variant::WithoutDag), micro(Variant::WithoutRope), micro(Variant::WithoutBoth));
    let pass = full >= no_dag && full >= no_rope && no_dag >= no_both && no_rope >= no_both;
    let secs = t0.elapsed().as_secs_f64();
    Outcome::check(
        pass,
        format!(
            "ablation trend on 200 stress dialogues, 5 seeds: Full {full:.2} / w/o TC-DAG {no_dag:.2} / w/o D-RoPE {no_rope:.2} / w/o Both {no_both:.2}, {secs:.0}s\n{}",
            table.format().lines().map(|l| format!("    {l}")).collect::<Vec<_>>().join("\n")
        ),
    )
}

fn c10_sweeps() -> Outcome {
    let records = gen_synthetic(&SyntheticSpec { dialogues: 6, min_utterances: 4, max_utterances: 5, ..SyntheticSpec::default() }).unwrap();
    let cfg = PipelineConfig { d: 8, head_width: 8, encoder_layers: 1, epochs: 2, lr_encoder: 1e-3, lr_rest: 1e-3, ..PipelineConfig::default() };
    let sweep = |vs: &[Variant]| run_ablation(&cfg, &records[..4], &records[4..], vs, &[3], None, |_| ()).unwrap();
    let (layers, windows) = (sweep(&Variant::layer_sweep()), sweep(&Variant::window_sweep()));
    let deterministic = layers == sweep(&Variant::layer_sweep()) && windows == sweep(&Variant::window_sweep());
    let shapes = layers.rows.len() == 4 && windows.rows.len() == 4 && layers.format().lines().count() == 5 && windows.format().lines().count() == 5;
    let labels: Vec<String> = layers.format().lines().chain(windows.format().lines()).filter(|l| !l.starts_with("Method")).map(|l| l.split_whitespace().next().unwrap().to_string()).collect();
    Outcome::check(
        deterministic && shapes,
        format!("parameter sweeps: {} + {} rows ({}), deterministic per seed {deterministic}", layers.rows.len(), windows.rows.len(), labels.join(" ")),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |i: usize| selected.is_empty() || selected.contains(&i);
    let criteria: Vec<(usize, fn() -> Vec<Outcome>)> = vec![
        (1, || vec![c1_oracle()]),
        (2, || vec![c2_structure()]),
        (3, || vec![c3_rotary()]),
        (4, || vec![c4_sign_inversion()]),
        (5, c5_dilution),
        (6, || vec![c6_gradients()]),
        (7, || vec![c7_round_trip()]),
        (8, || vec![c8_overfit()]),
        (9, || vec![c9_ablation()]),
        (10, || vec![c10_sweeps()]),
    ];
    let mut failed = Vec::new();
    for (i, run) in criteria {
        if !want(i) {
            continue;
        }
        for o in run() {
            let tag = if o.pass { "PASS" } else { "FAIL" };
            println!("criterion {i:>2} {tag} {}", o.detail);
            if o.enforced && !o.pass {
                failed.push(i);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("enforced criteria failed: {failed:?}");
        std::process::exit(1);
    }
}
