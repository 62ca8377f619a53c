use std::path::Path;
use std::process::Command;

fn header() -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/rankloss.h"))
        .unwrap()
}

#[test]
fn header_declares_the_api() {
    let h = header();
    for decl in [
        "typedef struct RlNetwork RlNetwork;",
        "typedef struct RlDataset RlDataset;",
        "RL_STATUS_OK = 0",
        "RL_STATUS_PANIC",
        "const char *rl_last_error(void);",
        "void rl_string_free(char *s);",
        "RlStatus rl_network_load(const char *path, RlNetwork **out_net);",
        "void rl_network_free(RlNetwork *net);",
        "size_t rl_max_compressive_rank(size_t rows, size_t cols);",
        "RlStatus rl_compress(",
        "RlStatus rl_factorize(",
        "RlStatus rl_evaluate(",
    ] {
        assert!(h.contains(decl), "missing {decl}");
    }
    assert!(h.starts_with("#ifndef RANKLOSS_H"));
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"rankloss.h\"\nint main(void) { RlNetwork *n = 0; return (int)rl_max_compressive_rank(4, 3) + (n == 0); }\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = match Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .status()
    {
        Ok(s) => s,
        Err(_) => {
            eprintln!("no C compiler; skipping");
            return;
        }
    };
    assert!(status.success());
}
