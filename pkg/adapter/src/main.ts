// Adapter entry point: serve the broker's wire protocol over stdio, relaying
// each step to a chat-completions endpoint (or the transcript cache) and
// emitting exactly one action per step. Diagnostics go to stderr and the
// optional log file; stdout carries protocol messages only.

import { appendFileSync } from "node:fs";
import { createInterface } from "node:readline";

import { loadConfig } from "./config.js";
import { ModelClient } from "./client.js";
import { encodeAction, parseBrokerMessage } from "./protocol.js";

export async function serve(): Promise<void> {
  const config = loadConfig();
  const log = (line: string): void => {
    const stamped = `adapter: ${line}`;
    process.stderr.write(stamped + "\n");
    if (config.logPath) {
      appendFileSync(config.logPath, stamped + "\n");
    }
  };
  const client = new ModelClient(config, log);
  const lines = createInterface({ input: process.stdin, terminal: false });
  const shutdown = (code: number): void => {
    // Release stdin so the event loop can drain and the process exits.
    lines.close();
    process.stdin.destroy();
    process.exitCode = code;
  };

  log(`serving model=${config.model} replay=${config.replayOnly ? "on" : "off"}`);
  for await (const line of lines) {
    if (!line.trim()) continue;
    let message;
    try {
      message = parseBrokerMessage(line);
    } catch (error) {
      log(`protocol error: ${(error as Error).message}`);
      shutdown(1);
      return;
    }
    if (message.type === "end") {
      log("episode ended by broker");
      shutdown(0);
      return;
    }
    const action = await client.decide(message);
    process.stdout.write(encodeAction(action) + "\n");
  }
  log("stdin closed");
  shutdown(0);
}

serve().catch((error) => {
  process.stderr.write(`adapter: fatal ${(error as Error).message}\n`);
  process.exitCode = 1;
});
