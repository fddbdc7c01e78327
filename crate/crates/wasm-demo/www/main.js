import init, { weiszfeldTrace, loreftField, compareAggregators } from "./pkg/fedreft_wasm.js";

const $ = (id) => document.getElementById(id);

function dot(ctx, x, y, r, color) {
  ctx.fillStyle = color;
  ctx.beginPath();
  ctx.arc(x, y, r, 0, 2 * Math.PI);
  ctx.fill();
}

// ---- 1. Weiszfeld ----

const wz = $("wz");
const wzCtx = wz.getContext("2d");
let points = [];

// world coordinates are [-10, 10]^2; far points are clamped to the border when drawn
const toScreen = ([x, y]) => [
  Math.min(Math.max((x + 10) / 20, 0), 1) * wz.width,
  (1 - Math.min(Math.max((y + 10) / 20, 0), 1)) * wz.height,
];
const toWorld = (sx, sy) => [(sx / wz.width) * 20 - 10, (1 - sy / wz.height) * 20 - 10];

function drawWeiszfeld() {
  wzCtx.clearRect(0, 0, wz.width, wz.height);
  for (const p of points) {
    const [x, y] = toScreen(p);
    dot(wzCtx, x, y, 4, "#555");
  }
  if (points.length === 0) {
    $("wz-out").textContent = "no points";
    return;
  }
  const t = JSON.parse(weiszfeldTrace(JSON.stringify(points)));
  wzCtx.strokeStyle = "#48c";
  wzCtx.beginPath();
  t.iterates.forEach((p, i) => {
    const [x, y] = toScreen(p);
    i === 0 ? wzCtx.moveTo(x, y) : wzCtx.lineTo(x, y);
  });
  wzCtx.stroke();
  for (const p of t.iterates) {
    const [x, y] = toScreen(p);
    dot(wzCtx, x, y, 2, "#48c");
  }
  dot(wzCtx, ...toScreen(t.mean), 6, "#c33");
  dot(wzCtx, ...toScreen(t.median), 6, "#282");
  const fmt = (v) => `(${v[0].toFixed(3)}, ${v[1].toFixed(3)})`;
  $("wz-out").textContent =
    `points      ${points.length}\n` +
    `mean        ${fmt(t.mean)}\n` +
    `median      ${fmt(t.median)}\n` +
    `iterations  ${t.iterates.length - 1}\n` +
    `sum dist    mean ${t.mean_objective.toExponential(4)}\n` +
    `            median ${t.objective[t.objective.length - 1].toExponential(4)}`;
}

wz.addEventListener("click", (e) => {
  const rect = wz.getBoundingClientRect();
  const p = toWorld(e.clientX - rect.left, e.clientY - rect.top);
  points.push(e.shiftKey ? [p[0] * 1e4, p[1] * 1e4] : p);
  drawWeiszfeld();
});
$("wz-clear").onclick = () => {
  points = [];
  drawWeiszfeld();
};
$("wz-random").onclick = () => {
  const cx = Math.random() * 8 - 4;
  const cy = Math.random() * 8 - 4;
  for (let i = 0; i < 6; i++) points.push([cx + Math.random() * 2 - 1, cy + Math.random() * 2 - 1]);
  drawWeiszfeld();
};

// ---- 2. LoReFT field ----

const field = $("field");
const fCtx = field.getContext("2d");

function drawField() {
  const req = {
    theta: +$("theta").value,
    w: [+$("w0").value, +$("w1").value],
    b: +$("b").value,
    extent: 2,
    steps: 15,
  };
  const f = JSON.parse(loreftField(JSON.stringify(req)));
  const scale = field.width / 4;
  const sx = (x) => (x + 2) * scale;
  const sy = (y) => (2 - y) * scale;
  fCtx.clearRect(0, 0, field.width, field.height);
  fCtx.strokeStyle = "#ddd";
  fCtx.beginPath();
  fCtx.moveTo(sx(-2), sy(0));
  fCtx.lineTo(sx(2), sy(0));
  fCtx.moveTo(sx(0), sy(-2));
  fCtx.lineTo(sx(0), sy(2));
  fCtx.stroke();
  fCtx.strokeStyle = "#282";
  fCtx.lineWidth = 2;
  fCtx.beginPath();
  fCtx.moveTo(sx(0), sy(0));
  fCtx.lineTo(sx(f.r[0]), sy(f.r[1]));
  fCtx.stroke();
  fCtx.lineWidth = 1;
  let longest = 0;
  for (const s of f.samples) longest = Math.max(longest, Math.hypot(...s.delta));
  const k = longest > 0 ? 0.25 / longest : 0;
  fCtx.strokeStyle = "#48c";
  for (const s of f.samples) {
    const [x0, y0] = [sx(s.h[0]), sy(s.h[1])];
    const [x1, y1] = [sx(s.h[0] + k * s.delta[0]), sy(s.h[1] + k * s.delta[1])];
    fCtx.beginPath();
    fCtx.moveTo(x0, y0);
    fCtx.lineTo(x1, y1);
    fCtx.stroke();
    dot(fCtx, x1, y1, 1.5, "#48c");
  }
  $("field-out").textContent =
    `R = (${f.r[0].toFixed(3)}, ${f.r[1].toFixed(3)})\n` +
    `max |Φ(h) − h| on grid = ${longest.toFixed(3)}\n` +
    `arrows scaled by ${k.toFixed(3)}`;
}

for (const id of ["theta", "w0", "w1", "b"]) $(id).addEventListener("input", drawField);

// ---- 3. aggregation comparison ----

const cmp = $("cmp");
const cCtx = cmp.getContext("2d");
const colors = { abm_geomedian: "#282", abm_mean: "#c80", fedavg: "#c33" };

function drawCurves(curves) {
  const W = cmp.width, H = cmp.height, pad = 30;
  cCtx.clearRect(0, 0, W, H);
  const n = curves[0].accuracy.length;
  const lo = Math.min(0.5, ...curves.flatMap((c) => c.accuracy));
  const x = (i) => pad + (n === 1 ? 0 : (i / (n - 1)) * (W - 2 * pad));
  const y = (a) => H - pad - ((a - lo) / (1 - lo)) * (H - 2 * pad);
  cCtx.strokeStyle = "#ccc";
  cCtx.strokeRect(pad, pad, W - 2 * pad, H - 2 * pad);
  cCtx.fillStyle = "#666";
  cCtx.fillText(lo.toFixed(2), 2, y(lo));
  cCtx.fillText("1.00", 2, y(1) + 8);
  for (const c of curves) {
    cCtx.strokeStyle = colors[c.method];
    cCtx.lineWidth = 2;
    cCtx.beginPath();
    c.accuracy.forEach((a, i) => (i === 0 ? cCtx.moveTo(x(i), y(a)) : cCtx.lineTo(x(i), y(a))));
    cCtx.stroke();
  }
  cCtx.lineWidth = 1;
}

$("run").onclick = () => {
  $("cmp-out").textContent = "running…";
  // let the browser paint the message before the blocking call
  setTimeout(() => {
    try {
      const req = { seed: +$("seed").value, rounds: +$("rounds").value };
      const t0 = performance.now();
      const curves = JSON.parse(compareAggregators(JSON.stringify(req)));
      drawCurves(curves);
      const last = (c) => c.accuracy[c.accuracy.length - 1].toFixed(4);
      $("cmp-out").textContent =
        curves.map((c) => `${c.method.padEnd(14)} final ${last(c)}  alphas ${JSON.stringify(c.alphas.at(-1))}`).join("\n") +
        `\n(${((performance.now() - t0) / 1000).toFixed(1)} s)`;
    } catch (err) {
      $("cmp-out").textContent = `error: ${err}`;
    }
  }, 20);
};

await init();
$("status").textContent = "";
points = [[-4, -3], [-3.2, -2.5], [-3.6, -4], [-2.8, -3.4], [6, 7]];
drawWeiszfeld();
drawField();
