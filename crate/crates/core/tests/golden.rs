//! Rendered prompts for fixture user 1 against checked-in files.
//! Set `UPDATE_GOLDENS=1` to rewrite them.

mod common;

#[test]
fn prompts_match_goldens() {
    let update = std::env::var_os("UPDATE_GOLDENS").is_some();
    for (name, text) in common::golden_prompts() {
        let path = common::golden_dir().join(name);
        if update {
            std::fs::write(&path, &text).unwrap();
            continue;
        }
        let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(text, want, "{name} drifted from its golden file");
    }
}
