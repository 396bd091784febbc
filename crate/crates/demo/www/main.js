import init, { infer_mask, recover, detect } from "./pkg/pmu_prospector_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function show(out, fn) {
  out.classList.remove("err");
  try {
    return fn();
  } catch (e) {
    out.classList.add("err");
    out.textContent = String(e);
    return null;
  }
}

function runMask() {
  const out = $("m-out");
  const r = show(out, () => JSON.parse(infer_mask($("m-counted").value, $("m-silent").value)));
  const grid = $("m-grid");
  grid.replaceChildren();
  if (!r) return;
  out.textContent = `mask ${r.mask}  ${r.consistent ? "consistent" : "no mask fits every observation"}`;
  r.predicted.forEach((on, u) => {
    const cell = document.createElement("div");
    cell.textContent = u.toString(16).padStart(2, "0").toUpperCase();
    if (on) cell.className = "on";
    grid.append(cell);
  });
}

function runChannel() {
  const out = $("c-out");
  const r = show(out, () =>
    JSON.parse(recover($("c-secret").value, $("c-attack").value, num("c-iter"), num("c-ff"), num("c-seed")))
  );
  if (!r) return;
  const conf = r.confidence.map((c) => c.toFixed(2)).join(" ");
  out.textContent =
    `recovered      "${r.recovered}"\n` +
    `error rate     ${r.error_rate.toFixed(4)}\n` +
    `throughput     ${r.throughput_bps.toFixed(2)} bytes/s (modeled)\n` +
    `tied bytes     ${r.low_confidence.length ? r.low_confidence.join(", ") : "none"}\n` +
    `confidence     ${conf}`;
}

function histogram(benign, attack) {
  const c = $("d-hist");
  const g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const all = benign.concat(attack);
  const lo = Math.min(...all);
  const hi = Math.max(...all);
  const bins = Math.min(60, hi - lo + 1);
  const width = (hi - lo + 1) / bins;
  const count = (xs) => {
    const h = new Array(bins).fill(0);
    for (const x of xs) h[Math.min(bins - 1, Math.floor((x - lo) / width))]++;
    return h;
  };
  const hb = count(benign);
  const ha = count(attack);
  const top = Math.max(...hb, ...ha);
  const bw = c.width / bins;
  const draw = (h, color, shift) => {
    g.fillStyle = color;
    h.forEach((v, i) => {
      const y = (v / top) * (c.height - 20);
      g.fillRect(i * bw + shift, c.height - 14 - y, bw / 2 - 1, y);
    });
  };
  draw(hb, "#3b7dd8", 0);
  draw(ha, "#d8543b", bw / 2);
  g.fillStyle = "#444";
  g.font = "11px monospace";
  g.fillText(String(lo), 2, c.height - 2);
  g.fillText(String(hi), c.width - 30, c.height - 2);
  g.fillText("benign", 60, 12);
  g.fillStyle = "#d8543b";
  g.fillText("attack", 120, 12);
}

function runDetect() {
  const out = $("d-out");
  const r = show(out, () => JSON.parse(detect($("d-attack").value, num("d-noise"), num("d-n"), num("d-seed"))));
  if (!r) return;
  const f = (x) => x.toFixed(4);
  out.textContent =
    `accuracy ${f(r.accuracy)}  precision ${f(r.precision)}  recall ${f(r.recall)}  f1 ${f(r.f1)}  auc ${f(r.auc)}\n` +
    `screen ${r.passed ? "pass" : "fail"}  (gradient descent epochs: ${r.epochs})`;
  histogram(r.benign, r.attack);
}

await init();
$("m-go").onclick = runMask;
$("c-go").onclick = runChannel;
$("d-go").onclick = runDetect;
runMask();
