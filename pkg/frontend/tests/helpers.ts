import { Scheduler } from "../src/state";

/** Deterministic manual scheduler: tasks run only when flush() is called. */
export class ManualScheduler {
  private tasks = new Map<number, () => void>();
  private next = 1;

  schedule: Scheduler = (fn) => {
    const id = this.next++;
    this.tasks.set(id, fn);
    return () => this.tasks.delete(id);
  };

  flush(): void {
    const pending = [...this.tasks.entries()];
    this.tasks.clear();
    for (const [, fn] of pending) fn();
  }

  get pendingCount(): number {
    return this.tasks.size;
  }
}

export const sleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

/** Let pending promise chains (fetch -> json -> apply) settle. */
export const flushAsync = () => new Promise<void>((r) => setTimeout(r, 0));
