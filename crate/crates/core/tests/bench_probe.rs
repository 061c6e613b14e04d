//! Manual timing probe (run with --ignored); not part of the suite.

use fedsl_core::config::ExperimentConfig;
use fedsl_core::corpus::{generate_corpus, CorpusConfig};
use fedsl_core::decoder::{beam_decode, BeamConfig};
use fedsl_core::numerics::tape::Tape;
use fedsl_core::rng::derive_rng;
use fedsl_core::transducer::{TapeModel, TransducerModel};
use std::time::Instant;

#[test]
#[ignore]
fn timing_probe() {
    let cfg = ExperimentConfig::default();
    let corpus = generate_corpus(&CorpusConfig {
        pretrain_utterances: 64,
        rehearsal_utterances: 16,
        eval_utterances_per_set: 16,
        population_devices: 2,
        device_stream_len: 8,
        ..CorpusConfig::default()
    })
    .unwrap();
    let dims = cfg.dims(corpus.vocab_words());
    let mut rng = derive_rng(1, &[1]);
    let model = TransducerModel::init_random(dims, &mut rng);

    let utts: Vec<_> = corpus.pretrain.iter().take(32).collect();
    let feats: Vec<_> = utts.iter().map(|u| corpus.features_for(u).unwrap()).collect();

    let start = Instant::now();
    let mut sink = 0.0;
    for (u, f) in utts.iter().zip(&feats) {
        let mut tape = Tape::new(&model.params);
        let tm = TapeModel::new(&mut tape, dims);
        let loss = tm.loss(&mut tape, f, &u.tokens).unwrap();
        let g = tape.backprop(loss).unwrap();
        sink += g.l2_norm();
    }
    let per = start.elapsed().as_secs_f64() / utts.len() as f64;
    println!("tape loss+grad: {:.2} ms/utt (sink {sink:.3})", per * 1e3);

    let start = Instant::now();
    let mut sink2 = 0usize;
    for f in &feats {
        let nbest = beam_decode(&model, f, &BeamConfig::default()).unwrap();
        sink2 += nbest.len();
    }
    let per = start.elapsed().as_secs_f64() / feats.len() as f64;
    println!("beam decode+rescore: {:.2} ms/utt (sink {sink2})", per * 1e3);

    let start = Instant::now();
    let mut sink3 = 0.0;
    for (u, f) in utts.iter().zip(&feats) {
        sink3 += model.loss(f, &u.tokens).unwrap();
    }
    let per = start.elapsed().as_secs_f64() / utts.len() as f64;
    println!("inference loss: {:.2} ms/utt (sink {sink3:.3})", per * 1e3);
}

#[test]
#[ignore]
fn error_probe() {
    // inspect decode errors of the calibration checkpoint at /tmp/cal
    let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
    let (params, _, _) = fedsl_core::numerics::load_checkpoint::<f64>(std::path::Path::new(
        "/tmp/cal/pretrain/init.ckpt",
    ))
    .unwrap();
    let cfg = ExperimentConfig::default();
    let dims = cfg.dims(corpus.vocab_words());
    let model = TransducerModel::with_params(dims, params).unwrap();
    let mut wrong = 0;
    for u in corpus.eval_general_old.iter().take(40) {
        let f = corpus.features_for(u).unwrap();
        let nbest = beam_decode(&model, &f, &BeamConfig::default()).unwrap();
        let hyp = &nbest.top().tokens;
        if hyp != &u.tokens {
            wrong += 1;
            if wrong <= 12 {
                println!("ref: {}", corpus.vocab.text(&u.tokens));
                println!("hyp: {}  (lp {:.2}, T={})", corpus.vocab.text(hyp), nbest.top().log_prob, f.frames());
                let truth_lp = model.posterior_log_prob(&f, &u.tokens).unwrap();
                println!("     truth lp {truth_lp:.2}");
            }
        }
    }
    println!("wrong: {wrong}/40");
}
