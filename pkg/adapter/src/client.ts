// Chat-completions client: builds a function-calling request from a broker
// step, sends it (or answers from the transcript cache), and maps the model's
// reply back to a broker action. Any upstream failure degrades to a finish
// action with an error note; the adapter never crashes an episode.

import { AdapterConfig } from "./config.js";
import { TranscriptCache, requestKey } from "./cache.js";
import { Action, StepMessage, ToolSchema } from "./protocol.js";

const SYSTEM_PROMPT =
  "You are an autonomous agent working on one task inside a sandboxed " +
  "workspace. Use the provided tools to act; when the task is complete, " +
  "reply with a short final answer instead of a tool call.";

interface ChatResponse {
  choices?: {
    message?: {
      content?: string | null;
      tool_calls?: { function?: { name?: string; arguments?: string } }[];
    };
  }[];
}

export function toolToFunctionSchema(tool: ToolSchema) {
  const properties: Record<string, { type: string }> = {};
  for (const [name, kind] of Object.entries(tool.args)) {
    properties[name] = { type: kind === "string" ? "string" : kind };
  }
  return {
    type: "function",
    function: {
      name: tool.name,
      description: `Broker tool ${tool.name}`,
      parameters: {
        type: "object",
        properties,
        required: Object.keys(tool.args),
      },
    },
  };
}

export function buildRequest(config: AdapterConfig, step: StepMessage) {
  const observations =
    step.observations.length === 0
      ? "none yet"
      : step.observations.map(([id, text]) => `[${id}] ${text}`).join("\n");
  return {
    model: config.model,
    temperature: config.temperature,
    messages: [
      { role: "system", content: SYSTEM_PROMPT },
      {
        role: "user",
        content: `Task: ${step.task}\nStep: ${step.step}\nObservations so far:\n${observations}`,
      },
    ],
    tools: step.tools.map(toolToFunctionSchema),
    tool_choice: "auto",
  };
}

export function responseToAction(response: ChatResponse): Action {
  const message = response.choices?.[0]?.message;
  const call = message?.tool_calls?.[0]?.function;
  if (call?.name) {
    let args: Record<string, string> = {};
    try {
      args = JSON.parse(call.arguments ?? "{}");
    } catch {
      return { type: "action", kind: "finish", answer: "adapter error: unparseable tool arguments" };
    }
    return { type: "action", kind: "tool_call", tool: call.name, args };
  }
  return { type: "action", kind: "finish", answer: message?.content ?? "" };
}

export class ModelClient {
  private cache: TranscriptCache;

  constructor(private config: AdapterConfig, private log: (line: string) => void) {
    this.cache = new TranscriptCache(config.cachePath);
  }

  async decide(step: StepMessage): Promise<Action> {
    const request = buildRequest(this.config, step);
    const key = requestKey(request);
    const cached = this.cache.lookup(key);
    if (cached !== undefined) {
      this.log(`cache hit ${key.slice(0, 12)} (step ${step.step})`);
      return responseToAction(cached as ChatResponse);
    }
    if (this.config.replayOnly) {
      this.log(`cache miss in replay mode ${key.slice(0, 12)}`);
      return { type: "action", kind: "finish", answer: "adapter error: transcript cache miss in replay mode" };
    }
    try {
      const response = await this.fetchCompletion(request);
      this.cache.store(key, request, response);
      this.log(`model reply for ${key.slice(0, 12)} (step ${step.step})`);
      return responseToAction(response);
    } catch (error) {
      this.log(`upstream failure: ${(error as Error).message}`);
      return {
        type: "action",
        kind: "finish",
        answer: `adapter error: upstream request failed (${(error as Error).message})`,
      };
    }
  }

  private async fetchCompletion(request: unknown): Promise<ChatResponse> {
    const headers: Record<string, string> = { "content-type": "application/json" };
    if (this.config.apiKey) {
      headers.authorization = `Bearer ${this.config.apiKey}`;
    }
    const response = await fetch(`${this.config.baseUrl}/chat/completions`, {
      method: "POST",
      headers,
      body: JSON.stringify(request),
      signal: AbortSignal.timeout(60_000),
    });
    if (!response.ok) {
      throw new Error(`status ${response.status}`);
    }
    return (await response.json()) as ChatResponse;
  }
}
