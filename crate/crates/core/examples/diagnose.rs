// scratch diagnostics for the flip-regime failure (deleted before release)
use mssrnet_core::checkpoint;
use mssrnet_core::data::gen_synthetic_with_references;
use mssrnet_core::nn::Ctx;
use mssrnet_core::Tape;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let model_path = std::path::Path::new(&args[1]);
    let teacher_path = std::path::Path::new(&args[2]);
    let loaded = checkpoint::load_training_checkpoint::<f32>(model_path).unwrap();
    let (teacher, _) = checkpoint::load_teacher::<f32>(teacher_path).unwrap();
    let (corpus, refs) = gen_synthetic_with_references(2, 2000, 7).unwrap();
    let model = &loaded.model;
    let vocab = &corpus.vocab;

    let mut style_norm_own = 0.0f64;
    let mut style_norm_flip = 0.0f64;
    let mut teach_norm = 0.0f64;
    let mut dist_own = 0.0f64;
    let mut dist_flip_gold = 0.0f64;
    let mut count = 0usize;

    println!("== E1: decode with oracle (teacher-encoded gold swap) style reps");
    for (i, sent) in corpus.sentences.iter().enumerate().rev().take(8) {
        let target = 1 - sent.style;
        let gold_tokens: Vec<usize> = refs[i][target].iter().map(|t| vocab.id(t)).collect();
        let mut tape: Tape<f32> = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape);
        // oracle: teacher encoding of the gold-swapped sentence as S_y
        let s_oracle = teacher.encode(&mut ctx, &gold_tokens);
        let content = model.encode_content(&mut ctx, &sent.ids).unwrap();
        let fused = model.fuse(&mut ctx, content, s_oracle).unwrap();
        let out = model.decode_greedy(&mut ctx, fused, sent.ids.len() + 4).unwrap();
        println!("  src : {}", vocab.decode(&sent.ids));
        println!("  gold: {}", refs[i][target].join(" "));
        println!("  out : {}", vocab.decode(&out));
    }

    println!("== also: model's own S_y(X, flip) decode");
    for sent in corpus.sentences.iter().rev().take(4) {
        let target = 1 - sent.style;
        let out = model.transfer(&sent.ids, target).unwrap();
        println!("  src: {}  ->  {}", vocab.decode(&sent.ids), vocab.decode(&out));
    }

    println!("== E2: style representation geometry");
    for (i, sent) in corpus.sentences.iter().enumerate().take(300) {
        let target = 1 - sent.style;
        let gold_tokens: Vec<usize> = refs[i][target].iter().map(|t| vocab.id(t)).collect();
        let mut tape: Tape<f32> = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape);
        let s_own = model.generate_style(&mut ctx, &sent.ids, sent.style).unwrap();
        let s_flip = model.generate_style(&mut ctx, &sent.ids, target).unwrap();
        let t_own = teacher.encode(&mut ctx, &sent.ids);
        let t_gold = teacher.encode(&mut ctx, &gold_tokens);
        let n = sent.ids.len();
        let d = model.cfg.d_style;
        let rows = |v| tape.values(v).iter().map(|&x| x as f64).collect::<Vec<f64>>();
        let (so, sf, to, tg) = (rows(s_own), rows(s_flip), rows(t_own), rows(t_gold));
        let norm = |v: &Vec<f64>| (v.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
        let dist = |a: &Vec<f64>, b: &Vec<f64>| {
            (a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / (n * d) as f64).sqrt()
        };
        style_norm_own += norm(&so);
        style_norm_flip += norm(&sf);
        teach_norm += norm(&to);
        dist_own += dist(&so, &to);
        dist_flip_gold += dist(&sf, &tg);
        count += 1;
    }
    let c = count as f64;
    println!("  row-norm: S(X,s_x) {:.3}  S(X,flip) {:.3}  teacher {:.3}", style_norm_own / c, style_norm_flip / c, teach_norm / c);
    println!("  rms-dist: S(X,s_x) vs teacher(X) {:.3}   S(X,flip) vs teacher(gold) {:.3}", dist_own / c, dist_flip_gold / c);
}
