use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tcn_gesture::dataio::{generate_clip, GeneratorParams, ThermalClip};
use tcn_gesture::evaluation::{delta_sweep, stitch_test_video, FrameOracle};
use tcn_gesture::model::{GestureModel, ModelConfig};
use tcn_gesture::objectives::ce_clip_loss;
use tcn_gesture::streaming::{EmaNormalizer, StreamConfig, StreamState};
use tcn_gesture::tcn::TcnConfig;
use tcn_gesture::training::{adam_step, normalize_clip};

fn clips(n: usize, seed: u64) -> Vec<ThermalClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| generate_clip(i % 10, &mut rng, &GeneratorParams::default()).unwrap())
        .collect()
}

#[test]
fn fixed_batch_loss_decreases_at_default_rate() {
    let batch: Vec<ThermalClip> = clips(4, 1).iter().map(|c| normalize_clip(c).unwrap()).collect();
    let mut model = GestureModel::new(ModelConfig::default(), 7).unwrap();
    let inputs: Vec<(&[f32], usize, usize)> = batch.iter().map(|c| (&c.frames[..], c.height, c.width)).collect();
    let mut losses = Vec::new();
    for _ in 0..11 {
        model.params.zero_grad();
        let per_clip = model
            .accumulate_gradients(&inputs, |k, logits| {
                let (l, mut g) = ce_clip_loss(logits, batch[k].class())?;
                g.data_mut().iter_mut().for_each(|v| *v *= 0.25);
                Ok((l, g))
            })
            .unwrap();
        losses.push(per_clip.iter().sum::<f32>());
        adam_step(&mut model.params, 1e-4).unwrap();
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "loss went up: {losses:?}");
    }
}

#[test]
fn causal_stream_at_zero_offset_matches_offline() {
    let config = ModelConfig {
        tcn: TcnConfig::causal(2, 4, 32, 64, 10),
        ..ModelConfig::default()
    };
    let model = GestureModel::new(config, 3).unwrap();
    let clip = &clips(1, 4)[0];
    let (h, w, frames) = (clip.height, clip.width, clip.len());
    let mut norm = EmaNormalizer::default();
    let normalized: Vec<f32> = (0..frames).flat_map(|t| norm.normalize(clip.frame(t)).unwrap()).collect();
    let offline = model.predict(&normalized, h, w).unwrap();
    let mut state = StreamState::new(StreamConfig {
        window: frames,
        delta: 0,
        ..StreamConfig::default()
    })
    .unwrap();
    for t in 0..frames {
        let p = state.push_frame(&model, clip.frame(t), h, w).unwrap().prediction.unwrap();
        assert_eq!(p.attributed, t);
        for (a, b) in p.probs.iter().zip(offline.row(t)) {
            assert_eq!(a.to_bits(), b.to_bits(), "frame {t}: {a} vs {b}");
        }
    }
}

#[test]
fn ground_truth_replay_scores_perfectly_at_every_offset() {
    let video = stitch_test_video(&clips(40, 9), 0.5, 2).unwrap();
    let oracle = FrameOracle::new(&video.nuclei, video.len(), 10).unwrap();
    let deltas: Vec<usize> = (0..24).collect();
    let rows = delta_sweep(&oracle, &video, 48, &deltas, 0.05).unwrap();
    for r in rows {
        assert_eq!(r.map, 1.0, "offset {}", r.delta);
        assert_eq!(r.events, video.nuclei.len());
    }
}
