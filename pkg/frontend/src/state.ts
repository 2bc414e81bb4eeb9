/**
 * Framework-free view-state core: slider panel model, slider-drag
 * debouncing, and the monotonic request-id guard that drops stale
 * responses. Kept free of DOM and network code so it is directly
 * unit-testable.
 */

import {
  ApiClient,
  ReconstructResponse,
  SwapSelection,
} from "./api";

/** Cancelable scheduler; injectable for tests. */
export type Scheduler = (fn: () => void, ms: number) => () => void;

const defaultScheduler: Scheduler = (fn, ms) => {
  const handle = setTimeout(fn, ms);
  return () => clearTimeout(handle);
};

/** Per-stage slider values; initialized from the captured attribute codes. */
export class SliderPanel {
  readonly values: number[][];
  readonly captured: number[][];

  constructor(
    readonly stages: number,
    readonly codeDim: number,
  ) {
    this.values = Array.from({ length: stages }, () => new Array<number>(codeDim).fill(0));
    this.captured = Array.from({ length: stages }, () => new Array<number>(codeDim).fill(0));
  }

  get sliderCount(): number {
    return this.stages * this.codeDim;
  }

  setFromCodes(codes: number[][]): void {
    if (codes.length !== this.stages || codes.some((z) => z.length !== this.codeDim)) {
      throw new Error(
        `expected ${this.stages} stages of ${this.codeDim} codes, got ` +
          `${codes.length} stages of ${codes.map((z) => z.length).join(",")}`,
      );
    }
    for (let s = 0; s < this.stages; s++) {
      for (let d = 0; d < this.codeDim; d++) {
        this.values[s][d] = codes[s][d];
        this.captured[s][d] = codes[s][d];
      }
    }
  }

  /** Value as sent to the server: an identity pass-through of the slider. */
  set(stage1Based: number, dim: number, value: number): void {
    this.check(stage1Based, dim);
    this.values[stage1Based - 1][dim] = value;
  }

  get(stage1Based: number, dim: number): number {
    this.check(stage1Based, dim);
    return this.values[stage1Based - 1][dim];
  }

  capturedValue(stage1Based: number, dim: number): number {
    this.check(stage1Based, dim);
    return this.captured[stage1Based - 1][dim];
  }

  private check(stage1Based: number, dim: number): void {
    if (stage1Based < 1 || stage1Based > this.stages) {
      throw new Error(`stage must be 1..${this.stages}, got ${stage1Based}`);
    }
    if (dim < 0 || dim >= this.codeDim) {
      throw new Error(`dim must be 0..${this.codeDim - 1}, got ${dim}`);
    }
  }
}

/** Trailing-edge debouncer: rapid submissions collapse to the latest one. */
export class Debouncer<T> {
  private cancel: (() => void) | null = null;

  constructor(
    private readonly delayMs: number,
    private readonly send: (payload: T) => void,
    private readonly schedule: Scheduler = defaultScheduler,
  ) {}

  submit(payload: T): void {
    if (this.cancel) this.cancel();
    this.cancel = this.schedule(() => {
      this.cancel = null;
      this.send(payload);
    }, this.delayMs);
  }

  get pending(): boolean {
    return this.cancel !== null;
  }

  flushCancel(): void {
    if (this.cancel) {
      this.cancel();
      this.cancel = null;
    }
  }
}

/**
 * Monotonically increasing request ids; a response may only be applied if
 * no newer response has been applied yet.
 */
export class StaleGuard {
  private nextId = 1;
  private lastApplied = 0;

  issue(): number {
    return this.nextId++;
  }

  tryApply(id: number): boolean {
    if (id <= this.lastApplied) return false;
    this.lastApplied = id;
    return true;
  }
}

export interface UploadState {
  uploadId: string;
  points: Float32Array;
  codes: number[][];
}

export interface ExplorerCallbacks {
  onRender: (points: Float32Array) => void;
  onError: (message: string) => void;
  onInfo?: (sliderPanel: SliderPanel) => void;
}

export const SLIDER_DEBOUNCE_MS = 150;

/**
 * The application state machine. The rendered cloud is always the latest
 * completed server response; slider edits are debounced and guarded
 * against out-of-order completion.
 */
export class ExplorerApp {
  sliders: SliderPanel | null = null;
  uploads: { A: UploadState | null; B: UploadState | null } = { A: null, B: null };
  cloud: Float32Array | null = null;
  codeDim = 0;
  stages = 0;

  private guard = new StaleGuard();
  private debouncer: Debouncer<{ stage: number; dim: number; value: number }>;

  constructor(
    private api: ApiClient,
    private callbacks: ExplorerCallbacks,
    scheduler: Scheduler = defaultScheduler,
    debounceMs: number = SLIDER_DEBOUNCE_MS,
  ) {
    this.debouncer = new Debouncer(debounceMs, (p) => void this.sendSweep(p), scheduler);
  }

  async loadInfo(): Promise<void> {
    try {
      const info = await this.api.info();
      const intAtLeast1 = (v: unknown) => Number.isInteger(v) && (v as number) >= 1;
      if (!intAtLeast1(info.stages) || !intAtLeast1(info.code_dim)) {
        throw new Error(`malformed /info response: ${JSON.stringify(info)}`);
      }
      this.stages = info.stages;
      this.codeDim = info.code_dim;
      this.sliders = new SliderPanel(info.stages, info.code_dim);
      this.callbacks.onInfo?.(this.sliders);
    } catch (err) {
      this.callbacks.onError(`service unreachable or malformed /info: ${String(err)}`);
      throw err;
    }
  }

  private applyCloud(id: number, flat: number[]): void {
    if (!this.guard.tryApply(id)) return; // stale: a newer response already rendered
    this.cloud = Float32Array.from(flat);
    this.callbacks.onRender(this.cloud);
  }

  async uploadImage(slot: "A" | "B", imagePngBase64: string): Promise<ReconstructResponse> {
    const resp = await this.api.reconstruct(imagePngBase64);
    const upload: UploadState = {
      uploadId: resp.upload_id,
      points: Float32Array.from(resp.points),
      codes: resp.codes.stages,
    };
    this.uploads[slot] = upload;
    if (slot === "A") {
      if (!this.sliders) throw new Error("call loadInfo() before uploading");
      this.sliders.setFromCodes(resp.codes.stages);
      this.applyCloud(this.guard.issue(), resp.points);
    }
    return resp;
  }

  /** Debounced: at most one in-flight sweep after the quiet period. */
  onSliderChange(stage: number, dim: number, value: number): void {
    if (!this.sliders || !this.uploads.A) {
      this.callbacks.onError("upload an image before dragging sliders");
      return;
    }
    this.sliders.set(stage, dim, value);
    this.debouncer.submit({ stage, dim, value });
  }

  restoreSlider(stage: number, dim: number): number {
    if (!this.sliders) throw new Error("no slider panel yet");
    const value = this.sliders.capturedValue(stage, dim);
    this.onSliderChange(stage, dim, value);
    return value;
  }

  private async sendSweep(p: { stage: number; dim: number; value: number }): Promise<void> {
    const upload = this.uploads.A;
    if (!upload) return;
    const id = this.guard.issue();
    try {
      const resp = await this.api.sweep(upload.uploadId, p.stage, p.dim, [p.value]);
      this.applyCloud(id, resp.clouds[0]);
    } catch (err) {
      // previous cloud stays on screen
      this.callbacks.onError(`sweep failed: ${String(err)}`);
    }
  }

  async applySwap(which: SwapSelection): Promise<void> {
    const { A, B } = this.uploads;
    if (!A || !B) {
      this.callbacks.onError("both uploads A and B are required for a swap");
      return;
    }
    const id = this.guard.issue();
    try {
      const resp = await this.api.swap(A.uploadId, B.uploadId, which);
      this.applyCloud(id, resp.points);
    } catch (err) {
      this.callbacks.onError(`swap failed: ${String(err)}`);
    }
  }
}
