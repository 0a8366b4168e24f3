// Transcript cache: append-only JSONL of {key, request, response}, keyed by a
// hash of the canonical request. Replay mode answers from the cache without
// touching the network, so recorded runs reproduce offline.

import { createHash } from "node:crypto";
import { appendFileSync, existsSync, readFileSync } from "node:fs";

function canonical(value: unknown): string {
  if (value === null || typeof value !== "object") return JSON.stringify(value);
  if (Array.isArray(value)) return `[${value.map(canonical).join(",")}]`;
  const entries = Object.entries(value as Record<string, unknown>)
    .sort(([a], [b]) => (a < b ? -1 : a > b ? 1 : 0))
    .map(([k, v]) => `${JSON.stringify(k)}:${canonical(v)}`);
  return `{${entries.join(",")}}`;
}

export function requestKey(request: unknown): string {
  return createHash("sha256").update(canonical(request)).digest("hex");
}

export class TranscriptCache {
  private entries = new Map<string, unknown>();

  constructor(private path: string | undefined) {
    if (path && existsSync(path)) {
      for (const line of readFileSync(path, "utf8").split("\n")) {
        if (!line.trim()) continue;
        const entry = JSON.parse(line);
        this.entries.set(entry.key, entry.response);
      }
    }
  }

  lookup(key: string): unknown | undefined {
    return this.entries.get(key);
  }

  store(key: string, request: unknown, response: unknown): void {
    if (this.entries.has(key)) return;
    this.entries.set(key, response);
    if (this.path) {
      appendFileSync(this.path, JSON.stringify({ key, request, response }) + "\n");
    }
  }
}
