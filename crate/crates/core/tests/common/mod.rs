#![allow(dead_code)]

use slmt::corpus::{generate_corpus, Corpus, CorpusSpec, ParallelExample, Split, Vocab};
use slmt::ModelConfig;

pub fn tiny_corpus(seed: u64) -> Corpus {
    generate_corpus(&CorpusSpec {
        pairs_per_direction: 40,
        valid_per_direction: 6,
        test_per_direction: 8,
        min_len: 3,
        max_len: 7,
        sem_vocab: 12,
        ..CorpusSpec::desk(seed)
    })
    .unwrap()
}

pub fn examples(c: &Corpus, split: Split) -> (Vocab, Vec<ParallelExample>) {
    let v = c.vocab();
    let ex = c.examples(split, &v).unwrap();
    (v, ex)
}

pub fn tiny_model(vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::desk(vocab);
    c.d_model = 16;
    c.n_heads = 2;
    c.ffn_dim = 24;
    c.n_enc_layers = 1;
    c.n_dec_layers = 1;
    c.n_ling_layers = 1;
    c.max_len = 16;
    c
}
