mod common;

use common::{assert_close, eval, grad_check, micro, random};
use melstyle::autograd::{finite_difference_check, Graph, ParamStore, RngStream, Tensor};
use melstyle::backbone::MelSpectrogram;
use melstyle::config::{ModelConfig, TrainConfig};
use melstyle::content_adaptor::{length_regulate, PitchPredictor};
use melstyle::nn::{positional_encoding, Fwd};
use melstyle::pipeline::corpus::{ToyCorpus, ToySpec};
use melstyle::pipeline::model::{Model, Prepared};
use melstyle::pipeline::train::pretrain_global;
use melstyle::style_adaptor::{
    am_softmax_loss, nearest_codes, pool_by_boundaries, segment_lengths, style_to_content_align, vq_quantize,
    AlignLayer, GlobalEncoder, LocalStyleEncoder, StyleAligner, StyleLevel,
};
use proptest::prelude::*;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn global_encoder_gives_two_hidden_vectors_deterministically() {
    let mut ps = ParamStore::new();
    let enc = GlobalEncoder::new(&mut ps, &mut RngStream::new(1), &micro()).unwrap();
    let mel = MelSpectrogram::new(random(&[9, 80], 2)).unwrap();
    let a = enc.encode(&ps, &mel).unwrap();
    let b = enc.encode(&ps, &mel.clone()).unwrap();
    assert_eq!(a.speaker.len(), micro().hidden);
    assert_eq!(a.emotion.len(), micro().hidden);
    assert_eq!(a, b);
}

#[test]
fn external_embeddings_are_projected_or_used_directly() {
    let cfg = micro();
    let mut ps = ParamStore::new();
    let enc = GlobalEncoder::new(&mut ps, &mut RngStream::new(1), &cfg).unwrap();
    let wide = enc.from_external(&ps, &random(&[cfg.external_dim], 3)).unwrap();
    assert_eq!(wide.speaker.len(), cfg.hidden);
    let direct = random(&[cfg.hidden], 4);
    let g = enc.from_external(&ps, &direct).unwrap();
    assert_eq!(g.speaker, direct.data());
    assert!(g.emotion.iter().all(|&v| v == 0.0));
    assert!(enc.from_external(&ps, &random(&[5], 5)).is_err());
}

#[test]
fn trained_global_encoder_separates_speakers_on_held_out_utterances() {
    let toy = ToyCorpus::new(ToySpec::default(), 11).unwrap();
    let cfg = ModelConfig { vocab_size: toy.vocab.len(), hidden: 16, embed_dim: 16, ..micro() };
    let mut model = Model::new(cfg.clone(), 5).unwrap();
    let train_set = toy.training_set().unwrap();
    let seen: Vec<(usize, usize, usize)> = (0..16).map(|i| (i, i % 4, i % 3)).collect();
    let data: Vec<Prepared> = train_set.into_iter().map(|u| Prepared::new(u, &cfg).unwrap()).collect();
    let train = TrainConfig { pretrain_steps: 150, ..TrainConfig::tiny() };
    pretrain_global(&mut model, &data, &train).unwrap();

    // Held out: text/speaker/emotion combinations absent from training.
    let mut held = Vec::new();
    for text in 0..16 {
        for s in 0..4 {
            let e = (text + s) % 3;
            if !seen.contains(&(text, s, e)) {
                held.push(toy.utterance(text, s, e).unwrap());
            }
        }
    }
    let embs: Vec<(usize, Vec<f64>)> =
        held.iter().map(|u| (u.speaker, model.global.encode(&model.params, &u.mel).unwrap().speaker)).collect();
    let (mut same, mut cross) = (Vec::new(), Vec::new());
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let c = cosine(&embs[i].1, &embs[j].1);
            if embs[i].0 == embs[j].0 {
                same.push(c);
            } else {
                cross.push(c);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&same) > mean(&cross), "same {} cross {}", mean(&same), mean(&cross));
}

#[test]
fn am_softmax_with_one_class_and_no_margin_is_zero() {
    let mut g = Graph::new(false);
    let e = g.constant(random(&[3, 4], 1));
    let c = g.constant(random(&[1, 4], 2));
    let l = am_softmax_loss(&mut g, e, &[0, 0, 0], c, 0.0, 1.0).unwrap();
    assert!(g.scalar(l).abs() < 1e-15);
}

#[test]
fn am_softmax_matches_the_closed_form() {
    let mut g = Graph::new(false);
    let e = g.constant(Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap());
    let c = g.constant(Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 0.5]]).unwrap());
    let l = am_softmax_loss(&mut g, e, &[0], c, 0.2, 30.0).unwrap();
    let want = (-24f64).exp().ln_1p();
    assert!((g.scalar(l) - want).abs() < 1e-14, "{} vs {want}", g.scalar(l));
    assert!((want - 3.8e-11).abs() < 1e-12);
}

#[test]
fn am_softmax_rejects_zero_rows_and_bad_labels() {
    let mut g = Graph::new(false);
    let e = g.constant(Tensor::zeros(&[1, 3]));
    let c = g.constant(random(&[2, 3], 1));
    assert!(am_softmax_loss(&mut g, e, &[0], c, 0.2, 30.0).is_err());
    let e = g.constant(random(&[1, 3], 2));
    assert!(am_softmax_loss(&mut g, e, &[2], c, 0.2, 30.0).is_err());
}

#[test]
fn am_softmax_gradient_matches_finite_differences() {
    let classes = random(&[3, 5], 1);
    let err = finite_difference_check(
        |g, x| {
            let c = g.constant(classes.clone());
            Ok(am_softmax_loss(g, x, &[2, 0, 1, 2], c, 0.2, 5.0).expect("loss"))
        },
        &random(&[4, 5], 2),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn pool(seq: &Tensor, b: &[usize]) -> melstyle::Result<Tensor> {
    let mut g = Graph::new(false);
    let s = g.constant(seq.clone());
    let p = pool_by_boundaries(&mut g, s, b)?;
    Ok(g.value(p).clone())
}

#[test]
fn single_segment_pools_to_the_column_mean() {
    let seq = random(&[6, 3], 1);
    let p = pool(&seq, &[0]).unwrap();
    for c in 0..3 {
        let m = (0..6).map(|r| seq.at(r, c)).sum::<f64>() / 6.0;
        assert!((p.at(0, c) - m).abs() < 1e-12);
    }
}

#[test]
fn every_frame_a_segment_is_the_identity() {
    let seq = random(&[5, 4], 2);
    assert_close(&pool(&seq, &[0, 1, 2, 3, 4]).unwrap(), &seq, 1e-15);
}

#[test]
fn bad_boundaries_are_rejected() {
    let seq = random(&[5, 2], 3);
    for b in [&[][..], &[1, 3], &[0, 3, 3], &[0, 4, 2], &[0, 5]] {
        assert!(pool(&seq, b).is_err(), "{b:?}");
    }
}

fn segmentation() -> impl Strategy<Value = (usize, Vec<usize>)> {
    (1usize..20).prop_flat_map(|t| (Just(t), proptest::collection::btree_set(1..t.max(2), 0..t)))
        .prop_map(|(t, set)| {
            let mut b = vec![0];
            b.extend(set.into_iter().filter(|&x| x < t));
            (t, b)
        })
}

proptest! {
    #[test]
    fn pooling_matches_a_segment_loop((t, b) in segmentation(), seed in 0u64..500) {
        let seq = random(&[t, 3], seed);
        let p = pool(&seq, &b).unwrap();
        prop_assert_eq!(p.rows(), b.len());
        for n in 0..b.len() {
            let end = b.get(n + 1).copied().unwrap_or(t);
            for c in 0..3 {
                let mut acc = 0.0;
                for r in b[n]..end {
                    acc += seq.at(r, c);
                }
                let m = acc / (end - b[n]) as f64;
                prop_assert!((p.at(n, c) - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_then_expanding_gives_segment_means((t, b) in segmentation(), seed in 0u64..500) {
        let seq = random(&[t, 2], seed);
        let ps = ParamStore::new();
        let lens = segment_lengths(&b, t);
        let expanded = eval(&ps, |f| {
            let s = f.g.constant(seq.clone());
            let p = pool_by_boundaries(f.g, s, &b)?;
            length_regulate(f, p, &lens)
        });
        prop_assert_eq!(expanded.rows(), t);
        for (n, &start) in b.iter().enumerate() {
            let end = start + lens[n];
            for c in 0..2 {
                let mean = (start..end).map(|r| seq.at(r, c)).sum::<f64>() / lens[n] as f64;
                for r in start..end {
                    prop_assert!((expanded.at(r, c) - mean).abs() < 1e-12);
                    prop_assert_eq!(expanded.at(r, c), expanded.at(start, c));
                }
            }
        }
    }
}

#[test]
fn row_on_code_five_maps_to_five_with_zero_loss() {
    let cb = random(&[8, 4], 1);
    let mut g = Graph::new(true);
    let z = g.constant(Tensor::from_rows(&[cb.row(5).to_vec()]).unwrap());
    let c = g.constant(cb.clone());
    let out = vq_quantize(&mut g, z, c, 0.25).unwrap();
    assert_eq!(out.indices, [5]);
    assert_eq!(g.scalar(out.loss), 0.0);
    assert_eq!(g.scalar(out.commitment), 0.0);
    assert_eq!(g.value(out.z_q).row(0), cb.row(5));
}

#[test]
fn single_code_takes_every_row() {
    let z = random(&[6, 3], 2);
    assert_eq!(nearest_codes(&z, &random(&[1, 3], 3)).unwrap(), [0; 6]);
    assert!(nearest_codes(&z, &random(&[2, 4], 4)).is_err());
}

#[test]
fn indices_match_an_exhaustive_scan() {
    let z = random(&[4, 6], 4);
    let cb = random(&[128, 6], 5);
    let got = nearest_codes(&z, &cb).unwrap();
    for n in 0..4 {
        let dists: Vec<f64> =
            (0..128).map(|k| (0..6).map(|d| (z.at(n, d) - cb.at(k, d)).powi(2)).sum::<f64>()).collect();
        let best = dists.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(got[n], dists.iter().position(|&d| d == best).unwrap());
    }
}

#[test]
fn straight_through_gradient_equals_the_probe() {
    let cb = random(&[16, 4], 6);
    let probe = random(&[5, 4], 7);
    let mut g = Graph::new(true);
    let z = g.input(random(&[5, 4], 8));
    let c = g.constant(cb);
    let out = vq_quantize(&mut g, z, c, 0.25).unwrap();
    let p = g.constant(probe.clone());
    let l = g.mul(out.z_q, p).unwrap();
    let l = g.sum(l).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(z).unwrap(), probe.data());
}

#[test]
fn codebook_gets_gradient_only_through_its_own_term() {
    let mut g = Graph::new(true);
    let z = g.input(random(&[3, 2], 1));
    let c = g.input(random(&[4, 2], 2));
    let out = vq_quantize(&mut g, z, c, 0.25).unwrap();
    let grads = g.backward(out.commitment).unwrap();
    assert!(grads.wrt(c).map_or(true, |v| v.iter().all(|&x| x == 0.0)));
    let grads = g.backward(out.loss).unwrap();
    assert!(grads.wrt(c).unwrap().iter().any(|&x| x != 0.0));
}

fn local(level: StyleLevel) -> (ParamStore, LocalStyleEncoder) {
    let mut ps = ParamStore::new();
    let e = LocalStyleEncoder::new(&mut ps, &mut RngStream::new(12), &micro(), level).unwrap();
    (ps, e)
}

#[test]
fn frame_level_keeps_length_and_word_level_pools() {
    let mel = random(&[11, 80], 1);
    let (ps, frame) = local(StyleLevel::Frame);
    let s = eval(&ps, |f| {
        let m = f.g.constant(mel.clone());
        Ok(frame.encode(f, m, None, true, 0.25)?.style())
    });
    assert_eq!(s.dims(), &[11, micro().hidden]);
    let (ps, word) = local(StyleLevel::Word);
    let s = eval(&ps, |f| {
        let m = f.g.constant(mel.clone());
        Ok(word.encode(f, m, Some(&[0, 4, 7]), true, 0.25)?.style())
    });
    assert_eq!(s.rows(), 3);
}

#[test]
fn boundary_rules_depend_on_the_level() {
    let mel = random(&[6, 80], 1);
    for (level, b) in [(StyleLevel::Frame, Some(&[0usize][..])), (StyleLevel::Phoneme, None), (StyleLevel::Word, None)] {
        let (ps, enc) = local(level);
        let mut g = Graph::new(false);
        let mut f = Fwd::new(&mut g, &ps, RngStream::new(0));
        let m = f.g.constant(mel.clone());
        assert!(enc.encode(&mut f, m, b, false, 0.25).is_err());
    }
}

#[test]
fn phoneme_level_equals_pooling_the_features() {
    let mel = random(&[10, 80], 2);
    let b = [0, 2, 3, 7];
    let (ps, enc) = local(StyleLevel::Phoneme);
    let direct = eval(&ps, |f| {
        let m = f.g.constant(mel.clone());
        Ok(enc.encode(f, m, Some(&b), false, 0.25)?.pre_vq)
    });
    let feats = eval(&ps, |f| {
        let m = f.g.constant(mel.clone());
        enc.features(f, m)
    });
    assert_eq!(direct, pool(&feats, &b).unwrap());
}

#[test]
fn local_encoder_gradients_match_finite_differences() {
    let mel = random(&[5, 80], 3);
    for (level, b) in [(StyleLevel::Frame, None), (StyleLevel::Word, Some(vec![0usize, 2]))] {
        let (mut ps, enc) = local(level);
        let report = grad_check(&mut ps, Some(5), |f| {
            let m = f.g.constant(mel.clone());
            let out = enc.encode(f, m, b.as_deref(), false, 0.25)?;
            let s = f.g.square(out.pre_vq)?;
            Ok(f.g.mean(s)?)
        });
        assert!(report.max_relative_error < 1e-4, "{level:?} {report:?}");
    }
}

fn align_layer(h: usize) -> (ParamStore, AlignLayer) {
    let mut ps = ParamStore::new();
    let cfg = ModelConfig { hidden: h, ..micro() };
    let a = StyleAligner::new(&mut ps, &mut RngStream::new(13), &cfg).unwrap();
    (ps, a.frame[0].clone())
}

#[test]
fn single_style_row_is_attended_by_every_frame() {
    let (ps, layer) = align_layer(8);
    let s = random(&[1, 8], 1);
    let out = eval(&ps, |f| {
        let h = f.g.constant(random(&[4, 8], 2));
        let sv = f.g.constant(s.clone());
        let sp = melstyle::style_adaptor::add_style_positions(f, sv)?;
        layer.attend(f, h, sp)
    });
    let pe = positional_encoding(1, 8);
    for r in 0..4 {
        for c in 0..8 {
            assert!((out.at(r, c) - (s.at(0, c) + pe.at(0, c))).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_values_give_the_same_attended_value_everywhere() {
    // Style rows chosen so that every position-tagged row is the same vector.
    let (ps, layer) = align_layer(8);
    let v = random(&[1, 8], 3);
    let pe = positional_encoding(3, 8);
    let rows: Vec<Vec<f64>> = (0..3).map(|n| (0..8).map(|c| v.at(0, c) - pe.at(n, c)).collect()).collect();
    let s = Tensor::from_rows(&rows).unwrap();
    let out = eval(&ps, |f| {
        let h = f.g.constant(random(&[5, 8], 4));
        let sv = f.g.constant(s.clone());
        let sp = melstyle::style_adaptor::add_style_positions(f, sv)?;
        layer.attend(f, h, sp)
    });
    for r in 0..5 {
        for c in 0..8 {
            assert!((out.at(r, c) - v.at(0, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_matches_a_direct_oracle() {
    let (ps, layer) = align_layer(8);
    let h = random(&[3, 8], 5);
    let s = random(&[2, 8], 6);
    let out = eval(&ps, |f| {
        let hv = f.g.constant(h.clone());
        let sv = f.g.constant(s.clone());
        let sp = melstyle::style_adaptor::add_style_positions(f, sv)?;
        layer.attend(f, hv, sp)
    });
    let pe = positional_encoding(2, 8);
    let sp: Vec<Vec<f64>> = (0..2).map(|n| (0..8).map(|c| s.at(n, c) + pe.at(n, c)).collect()).collect();
    let proj = |x: &[f64], w: &Tensor| -> Vec<f64> { (0..8).map(|j| (0..8).map(|i| x[i] * w.at(i, j)).sum()).collect() };
    let keys: Vec<Vec<f64>> = sp.iter().map(|r| proj(r, ps.get(layer.k.w))).collect();
    for t in 0..3 {
        let q = proj(h.row(t), ps.get(layer.q.w));
        let scores: Vec<f64> = keys.iter().map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / 8f64.sqrt()).collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..8 {
            let want = (0..2).map(|n| e[n] / z * sp[n][c]).sum::<f64>();
            assert!((out.at(t, c) - want).abs() < 1e-6);
        }
    }
}

#[test]
fn aligned_output_is_content_shaped_and_attention_is_stochastic() {
    let mut ps = ParamStore::new();
    let cfg = micro();
    let a = StyleAligner::new(&mut ps, &mut RngStream::new(14), &cfg).unwrap();
    for n in [1, 2, 7] {
        let mut g = Graph::new(false);
        let mut f = Fwd::new(&mut g, &ps, RngStream::new(0));
        f.record_attention = true;
        let h = f.g.constant(random(&[6, 8], 1));
        let styles = [f.g.constant(random(&[6, 8], 2)), f.g.constant(random(&[n, 8], 3)), f.g.constant(random(&[1, 8], 4))];
        let out = a.align(&mut f, h, styles).unwrap();
        let out = a.refine(&mut f, out).unwrap();
        assert_eq!(f.g.dims(out), &[6, 8]);
        assert_eq!(f.attention.len(), 3 * cfg.align_layers);
        for m in &f.attention {
            for r in 0..m.rows() {
                assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn alignment_gradients_match_finite_differences() {
    let mut ps = ParamStore::new();
    let a = StyleAligner::new(&mut ps, &mut RngStream::new(15), &micro()).unwrap();
    let h = random(&[3, 8], 1);
    let s = random(&[2, 8], 2);
    let report = grad_check(&mut ps, None, |f| {
        let hv = f.g.constant(h.clone());
        let sv = f.g.constant(s.clone());
        let out = style_to_content_align(f, hv, sv, &a.frame, 0.0)?;
        let out = a.refine(f, out)?;
        let sq = f.g.square(out)?;
        Ok(f.g.mean(sq)?)
    });
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn style_specific_predictor_follows_the_predictor_contract() {
    let cfg = micro();
    let mut ps = ParamStore::new();
    let ssp = PitchPredictor::new(&mut ps, &mut RngStream::new(16), "ssp", &cfg).unwrap();
    let zero = PitchPredictor::new_zero_head(&mut ps, &mut RngStream::new(17), "ssp0", &cfg).unwrap();
    let x = random(&[5, cfg.hidden], 1);
    let shape = eval(&ps, |f| {
        let xv = f.g.constant(x.clone());
        Ok(ssp.predict(f, xv)?.coeffs)
    });
    assert_eq!(shape.dims(), &[5, cfg.n_scales]);
    let z = eval(&ps, |f| {
        let xv = f.g.constant(x.clone());
        Ok(zero.predict(f, xv)?.coeffs)
    });
    assert!(z.data().iter().all(|&v| v == 0.0));
    let report = grad_check(&mut ps, None, |f| {
        let xv = f.g.constant(x.clone());
        let p = ssp.predict(f, xv)?;
        let a = f.g.square(p.coeffs)?;
        let a = f.g.mean(a)?;
        let b = f.g.sum(p.stats)?;
        Ok(f.g.add(a, b)?)
    });
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}
