mod support;

#[test]
fn every_statement_kind_round_trips() {
    match support::codec_corpus::check(9, 20) {
        Ok(msg) => println!("{msg}"),
        Err(e) => panic!("{e}"),
    }
}
