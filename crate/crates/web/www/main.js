import init, { Studio } from "./pkg/rln2_web.js";

const $ = (id) => document.getElementById(id);
const MAX_LIGHTS = 3;
let studio = null;

function draw(canvas, frame) {
  canvas.width = frame.width;
  canvas.height = frame.height;
  const img = new ImageData(new Uint8ClampedArray(frame.pixels()), frame.width, frame.height);
  canvas.getContext("2d").putImageData(img, 0, 0);
  canvas.style.aspectRatio = `${frame.width} / ${frame.height}`;
  frame.free();
}

function lightValues() {
  const values = [];
  for (const set of document.querySelectorAll("fieldset.light")) {
    for (const name of ["hue", "saturation", "intensity", "azimuth", "elevation"]) {
      values.push(Number(set.querySelector(`[name=${name}]`).value));
    }
  }
  return new Float64Array(values);
}

function addLight(hue, azimuth) {
  const lights = $("lights");
  if (lights.children.length >= MAX_LIGHTS) return;
  const node = $("light-template").content.firstElementChild.cloneNode(true);
  node.querySelector("[name=hue]").value = hue;
  node.querySelector("[name=azimuth]").value = azimuth;
  node.querySelector("button.remove").addEventListener("click", () => {
    if (lights.children.length > 1) {
      node.remove();
      relabel();
      refresh();
    }
  });
  node.addEventListener("input", refresh);
  lights.append(node);
  relabel();
}

function relabel() {
  [...$("lights").children].forEach((n, i) => (n.querySelector("legend").textContent = `light ${i + 1}`));
  $("add-light").disabled = $("lights").children.length >= MAX_LIGHTS;
}

function report(fn) {
  try {
    fn();
    $("status").textContent = "";
  } catch (e) {
    $("status").textContent = String(e.message ?? e);
  }
}

function refresh() {
  report(() => {
    draw($("render"), studio.relight(lightValues(), $("shadows").checked));
    draw($("guidance"), studio.guidance($("guidance-mode").value));
    draw($("subbands"), studio.subbands(Number($("levels").value), Number($("gain").value)));
  });
}

function rebuild() {
  report(() => {
    studio?.free();
    studio = new Studio(Number($("seed").value), Number($("size").value));
  });
  refresh();
}

await init();
addLight(20, 30);
addLight(210, 200);
$("add-light").addEventListener("click", () => {
  addLight(Math.floor(Math.random() * 360), Math.floor(Math.random() * 360));
  refresh();
});
for (const id of ["seed", "size"]) $(id).addEventListener("change", rebuild);
for (const id of ["shadows", "guidance-mode", "levels", "gain"]) $(id).addEventListener("input", refresh);
rebuild();
