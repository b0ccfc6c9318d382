//! Trains the embedder with hard-negative triplets on the query catalogue,
//! builds and reloads a gallery index, then classifies augmented views.
//!
//! `cargo run --release --example gallery`

use rackscan::archive;
use rackscan::embedder::{augment, train_embedder, AugmentParams, Embedder, EmbedderConfig, EmbedderSchedule};
use rackscan::gallery::{build_gallery, classify, load_index, save_index, topk};
use rackscan::synthetic::{query_database, SyntheticSpec};

fn main() -> rackscan::Result<()> {
    let db = query_database(&SyntheticSpec::default())?;
    let aug = AugmentParams::default();
    let schedule = EmbedderSchedule { epochs: 15, ..EmbedderSchedule::desk() };
    let run = train_embedder(Embedder::<f32>::new(EmbedderConfig::desk(), 3), &db, &schedule, &aug, 4)?;
    for e in &run.epochs {
        println!("epoch {:>2}  mean triplet loss {:.4}  active {:.2}", e.epoch + 1, e.mean_loss, e.active_triplet_fraction);
    }

    let fingerprint = archive::fingerprint(&archive::to_bytes(&run.embedder)?);
    let index = build_gallery(&db, &run.embedder, &fingerprint, 10, &aug, 5)?;
    let path = std::env::temp_dir().join("rackscan-gallery.idx");
    save_index(&index, &path)?;
    let index = load_index(&path)?;
    index.verify_fingerprint(&fingerprint)?;
    println!("gallery: {} entries of dim {}", index.len(), index.dim());

    let (mut hits, mut total) = (0, 0);
    for (c, q) in db.iter().enumerate() {
        for k in 0..10 {
            let view = augment(&q.image, &aug, 500_000 + 100 * c as u64 + k);
            let e = run.embedder.encode(&view)?;
            let (label, _) = classify(&e, &index);
            hits += usize::from(label == q.label);
            total += 1;
            if k == 0 {
                let ranked: Vec<String> = topk(&e, &index, 3).into_iter().map(|(l, d)| format!("{l} {d:.3}")).collect();
                println!("{:<8} -> {}", q.label, ranked.join(", "));
            }
        }
    }
    println!("1-NN accuracy on held-out augmentations: {hits}/{total}");
    Ok(())
}
