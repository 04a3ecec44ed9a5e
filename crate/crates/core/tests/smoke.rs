use unistack::codegen::Rules;
use unistack::emu::{reference::interpret, run};
use unistack::pipeline::build_source;
use unistack::stackmap::verify;

const SRC: &str = r#"
global g: i64 = 5
func sq(%x: i64) -> i64 {
  %y = mul %x, %x
  ret %y
}
func main() {
  local i: i64
  %z = const 0
  %p = addr-of-local i
  store %z, %p
  br head
head:
  %v = load %p
  %c = cmp lt %v, 4
  br-cond %c, body, done
body:
  %s = call sq(%v)
  %gp = addr-of-global g
  %gv = load %gp
  %t = add %s, %gv
  emit %t
  %n = add %v, 1
  store %n, %p
  br head
done:
  ret 0
}
"#;

#[test]
fn simple_program_runs_on_both_targets() {
    let (prog, b) = build_source(SRC, &Rules::default()).unwrap();
    let want = interpret(&prog, 100_000).unwrap().output;
    for img in [&b.x64, &b.a64] {
        let s = run(img, 100_000).unwrap();
        assert_eq!(s.output, want, "{:?}", img.target);
    }
    let r = verify(&b.x64, &b.a64);
    assert!(r.equivalent, "{:?}", r.mismatches);
}
