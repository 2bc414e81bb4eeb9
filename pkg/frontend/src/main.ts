/**
 * DOM assembly: server URL field, uploads A/B, per-stage slider panels,
 * swap toggles, status banner, and the 3D view.
 */

import { ApiClient, SwapSelection } from "./api";
import { ExplorerApp, SliderPanel } from "./state";
import { CloudViewer } from "./viewer";

const root = document.getElementById("app") as HTMLDivElement;

const banner = document.createElement("div");
banner.id = "banner";
banner.className = "banner hidden";

function showError(message: string): void {
  banner.textContent = message;
  banner.classList.remove("hidden");
  setTimeout(() => banner.classList.add("hidden"), 6000);
}

const controls = document.createElement("div");
controls.className = "controls";

const urlField = document.createElement("input");
urlField.type = "text";
urlField.value = localStorage.getItem("apc-server") ?? "http://127.0.0.1:8000";
urlField.className = "url-field";

const connectBtn = document.createElement("button");
connectBtn.textContent = "connect";

const fileA = document.createElement("input");
fileA.type = "file";
fileA.accept = "image/png";
const fileB = document.createElement("input");
fileB.type = "file";
fileB.accept = "image/png";

const labelA = document.createElement("label");
labelA.append("input A ", fileA);
const labelB = document.createElement("label");
labelB.append("input B ", fileB);

controls.append(urlField, connectBtn, labelA, labelB);

const sliderHost = document.createElement("div");
sliderHost.id = "sliders";
const swapHost = document.createElement("div");
swapHost.id = "swap-panel";

const canvas = document.createElement("canvas");
canvas.id = "viewer";
canvas.width = 720;
canvas.height = 540;

root.append(banner, controls, sliderHost, swapHost, canvas);

const viewer = new CloudViewer(canvas, canvas.width, canvas.height);

let app: ExplorerApp | null = null;

function buildSliderPanels(panel: SliderPanel): void {
  sliderHost.replaceChildren();
  for (let stage = 1; stage <= panel.stages; stage++) {
    const box = document.createElement("fieldset");
    const legend = document.createElement("legend");
    legend.textContent = `stage ${stage}`;
    box.append(legend);
    for (let dim = 0; dim < panel.codeDim; dim++) {
      const row = document.createElement("div");
      row.className = "slider-row";
      const slider = document.createElement("input");
      slider.type = "range";
      slider.min = "-3";
      slider.max = "3";
      slider.step = "0.01";
      slider.value = String(panel.get(stage, dim));
      slider.dataset.stage = String(stage);
      slider.dataset.dim = String(dim);
      slider.addEventListener("input", () => {
        app?.onSliderChange(stage, dim, Number(slider.value));
      });
      const reset = document.createElement("button");
      reset.textContent = "restore";
      reset.addEventListener("click", () => {
        const v = app?.restoreSlider(stage, dim);
        if (v !== undefined) slider.value = String(v);
      });
      const tag = document.createElement("span");
      tag.textContent = `z${dim}`;
      row.append(tag, slider, reset);
      box.append(row);
    }
    sliderHost.append(box);
  }
}

function refreshSliderValues(panel: SliderPanel): void {
  for (const el of sliderHost.querySelectorAll<HTMLInputElement>("input[type=range]")) {
    const stage = Number(el.dataset.stage);
    const dim = Number(el.dataset.dim);
    el.value = String(panel.get(stage, dim));
  }
}

function buildSwapPanel(stages: number): void {
  swapHost.replaceChildren();
  const boxes: { comp: string; stage: number; el: HTMLInputElement }[] = [];
  for (const comp of ["z", "mu", "sigma"]) {
    const group = document.createElement("span");
    group.append(` ${comp}: `);
    for (let stage = 1; stage <= stages; stage++) {
      const cb = document.createElement("input");
      cb.type = "checkbox";
      const label = document.createElement("label");
      label.append(cb, String(stage));
      group.append(label);
      boxes.push({ comp, stage, el: cb });
    }
    swapHost.append(group);
  }
  const swapBtn = document.createElement("button");
  swapBtn.textContent = "swap A<-B";
  swapBtn.addEventListener("click", () => {
    const which: SwapSelection = {};
    for (const { comp, stage, el } of boxes) {
      if (el.checked) (which[comp] ??= []).push(stage);
    }
    void app?.applySwap(which);
  });
  swapHost.append(swapBtn);
}

async function fileToBase64Png(file: File): Promise<string> {
  const dataUrl = await new Promise<string>((resolve, reject) => {
    const reader = new FileReader();
    reader.onload = () => resolve(String(reader.result));
    reader.onerror = () => reject(reader.error);
    reader.readAsDataURL(file);
  });
  return dataUrl.replace(/^data:image\/png;base64,/, "");
}

connectBtn.addEventListener("click", async () => {
  localStorage.setItem("apc-server", urlField.value);
  const api = new ApiClient(urlField.value);
  app = new ExplorerApp(api, {
    onRender: (pts) => viewer.setCloud(pts),
    onError: showError,
    onInfo: (panel) => {
      buildSliderPanels(panel);
      buildSwapPanel(panel.stages);
    },
  });
  try {
    await app.loadInfo();
    banner.classList.add("hidden");
  } catch {
    /* banner already shown by the error callback */
  }
});

async function handleUpload(slot: "A" | "B", input: HTMLInputElement): Promise<void> {
  const file = input.files?.[0];
  if (!file || !app) return;
  try {
    await app.uploadImage(slot, await fileToBase64Png(file));
    if (slot === "A" && app.sliders) refreshSliderValues(app.sliders);
  } catch (err) {
    showError(`upload ${slot} failed: ${String(err)}`);
  }
}

fileA.addEventListener("change", () => void handleUpload("A", fileA));
fileB.addEventListener("change", () => void handleUpload("B", fileB));
