// Calibration probe: trains a toy model and reports retrieval accuracy,
// identity diversity, and the guided-generation nuisance correlation.
//
//     cargo run --release --example calibrate [iters] [batch] [seed] [dataset]

use std::sync::Arc;
use std::time::Instant;

use clipgen_core::adapter::AdapterConfig;
use clipgen_core::bank::build_bank;
use clipgen_core::checkpoint::load_checkpoint_bytes;
use clipgen_core::embedding::{Embedding, EmbeddingBackend, ToyEmbedder};
use clipgen_core::eval::{
    id_diversity, retrieval_accuracy_embeddings, toy_captions, ToyIdentity,
};
use clipgen_core::generator::{AffineDecoderGenerator, GeneratorBackend};
use clipgen_core::infer::{GenerationMode, InferenceEngine, InferenceOptions};
use clipgen_core::losses::RandomFeaturePyramid;
use clipgen_core::prior::PriorConfig;
use clipgen_core::train::{prepare_items, train, TrainConfig};
use clipgen_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iterations: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let dataset_n: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1500);

    let embedder = Arc::new(ToyEmbedder::with_defaults(11));
    let generator = Arc::new(AffineDecoderGenerator::toy(embedder.world(), 7));
    let perceptual = RandomFeaturePyramid::new(5, 3);
    let identity = ToyIdentity::new(3, embedder.image_shape());

    let t0 = Instant::now();
    let samples = embedder.world().sample_many(dataset_n, 100);
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let items = prepare_items(&images, embedder.as_ref(), &perceptual).unwrap();
    let ids: Vec<String> = (0..images.len()).map(|i| format!("train-{i:05}")).collect();
    let bank = build_bank(embedder.as_ref(), &images, &ids).unwrap();
    println!("dataset+bank: {:.1}s", t0.elapsed().as_secs_f64());

    // negative pool: fresh toy samples
    let pool_images = embedder.world().sample_many(1000, 555);
    let pool: Vec<Embedding> = pool_images
        .iter()
        .map(|s| embedder.embed_image(&s.image).unwrap())
        .collect();

    let acfg = AdapterConfig {
        init_seed: 1 + seed,
        ..AdapterConfig::toy_defaults(embedder.dim(), embedder.image_shape(), generator.latent_len())
    };
    let tcfg = TrainConfig {
        iterations,
        batch_size: batch,
        seed,
        checkpoint_every: 0,
        ..Default::default()
    };
    let t0 = Instant::now();
    let (adapter, report) = train(
        &acfg, &tcfg, &items, embedder.as_ref(), generator.as_ref(), &perceptual, None,
    )
    .unwrap();
    let lastrec = report.records.last().unwrap();
    println!(
        "train {iterations} iters batch {batch}: {:.1}s  loss {:.4} -> {:.4} (lpips {:.4} cycle {:.4} wn {:.2} kl {:.2})",
        t0.elapsed().as_secs_f64(),
        report.first_total().unwrap(),
        report.last_total().unwrap(),
        lastrec.components.perceptual,
        lastrec.components.clip_cycle,
        lastrec.components.w_norm,
        lastrec.components.kl,
    );
    // round-trip through a checkpoint like real inference would
    let buf = {
        let dir = std::env::temp_dir().join(format!("calib-{seed}.cvck"));
        clipgen_core::checkpoint::save_checkpoint(&dir, &adapter).unwrap();
        let b = std::fs::read(&dir).unwrap();
        let _ = std::fs::remove_file(&dir);
        b
    };
    let adapter = load_checkpoint_bytes(&buf, adapter.config()).unwrap();

    let engine = InferenceEngine::new(
        adapter,
        generator.clone() as Arc<dyn GeneratorBackend>,
        embedder.clone() as Arc<dyn EmbeddingBackend>,
        Some(bank),
        InferenceOptions { prior: PriorConfig::default(), ..Default::default() },
    )
    .unwrap();

    let captions = toy_captions();
    let per_caption = 10usize;
    let mut top1_pt = 0.0;
    let mut top1_full = 0.0;
    let mut div_pt = 0.0;
    let mut div_full = 0.0;
    let t0 = Instant::now();
    for (ci, cap) in captions.iter().enumerate() {
        for (mode, top1, div) in [
            (GenerationMode::Pt, &mut top1_pt, &mut div_pt),
            (GenerationMode::Full, &mut top1_full, &mut div_full),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(9000 + ci as u64);
            let imgs = engine.generate(mode, cap, None, per_caption, &mut rng).unwrap();
            let embs: Vec<Embedding> =
                imgs.iter().map(|i| embedder.embed_image(i).unwrap()).collect();
            let text = embedder.embed_text(cap).unwrap();
            let mut nrng = ChaCha8Rng::seed_from_u64(7000 + ci as u64);
            let acc =
                retrieval_accuracy_embeddings(&embs, &text, &pool, 99, &[1, 5], &mut nrng).unwrap();
            *top1 += acc[0].1;
            *div += id_diversity(&imgs, &identity).unwrap();
        }
    }
    let nc = captions.len() as f64;
    println!(
        "eval: {:.1}s  pt top-1 {:.3} div {:.3} | full top-1 {:.3} div {:.3}",
        t0.elapsed().as_secs_f64(),
        top1_pt / nc,
        div_pt / nc,
        top1_full / nc,
        div_full / nc
    );

    // nuisance correlation: guided generation with the guidance image's own
    // embedding as context, posterior-mean code; does output nuisance track
    // guidance nuisance?
    let world = embedder.world();
    let guides = world.sample_many(200, 777);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for g in &guides {
        let ctx = embedder.embed_image(&g.image).unwrap();
        let (mu, _) = engine.adapter().encode(&g.image, &ctx).unwrap();
        let img = engine.generate_one(&ctx, &mu).unwrap();
        let out_n = world.read_nuisance(&img);
        for d in 0..4 {
            xs.push(g.nuisance[d]);
            ys.push(out_n[d]);
        }
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    println!("guided nuisance pearson r = {:.3}", cov / (vx.sqrt() * vy.sqrt()));
}
